"""
Machine probing used to size the worker pool and to log the run environment
"""

import os
import logging
import platform
from typing import Any, Dict

import psutil

logger = logging.getLogger(__name__)

THREADS_ENV_VAR = "PEDQTL_THREADS"


def get_system_info() -> Dict[str, Any]:
    """
    Collect the machine facts recorded at the start of a run

    Returns:
        Dict with platform, cpu and memory sections
    """
    try:
        memory = psutil.virtual_memory()
        return {
            'platform': {
                'system': platform.system(),
                'machine': platform.machine(),
                'python': platform.python_version(),
            },
            'cpu': {
                'physical_cores': psutil.cpu_count(logical=False),
                'logical_cores': psutil.cpu_count(logical=True),
            },
            'memory': {
                'total_gb': round(memory.total / (1024 ** 3), 2),
                'available_gb': round(memory.available / (1024 ** 3), 2),
            },
        }
    except Exception as e:
        logger.warning(f"Could not collect system information: {e}")
        return {
            'platform': {'system': platform.system()},
            'cpu': {'logical_cores': os.cpu_count()},
            'memory': {},
        }


def default_thread_count() -> int:
    """Thread budget when the control file does not set one"""
    env_value = os.environ.get(THREADS_ENV_VAR)
    if env_value:
        try:
            threads = int(env_value)
            if threads > 0:
                return threads
        except ValueError:
            pass
        logger.warning(f"Ignoring invalid {THREADS_ENV_VAR}={env_value!r}")
    return psutil.cpu_count(logical=True) or 1


def log_system_info() -> None:
    info = get_system_info()
    cpu = info.get('cpu', {})
    memory = info.get('memory', {})
    logger.info(
        f"Machine: {info['platform'].get('system')} {info['platform'].get('machine', '')}, "
        f"{cpu.get('logical_cores')} logical cores, "
        f"{memory.get('available_gb', '?')}/{memory.get('total_gb', '?')} GB memory available"
    )
