"""
Control file parsing

    # comment
    pedigree_file = peds.csv
    traits = SBP, DBP
    covariates = sex, age=age_1|age_2
    [simulation]
    replicates = 200

Every key is typed and validated on load; unknown keys are rejected. The
resolved configuration (defaults filled, paths made absolute) is echoed to
control.resolved in the output directory.
"""

import os
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np

from .errors import ConfigError
from .helper.system import THREADS_ENV_VAR, default_thread_count
from .kinship import KINSHIP_MODES
from .vcmodel import COMPONENT_MULTIPLIERS

logger = logging.getLogger(__name__)

SIMULATION_SECTION = "simulation"
RESOLVED_NAME = "control.resolved"
SUBCOMMANDS = ("scan", "batch", "power", "kinship")


# ---------------------------------------------------------------------------
# Value parsers
# ---------------------------------------------------------------------------

def _text(value: str) -> str:
    return value


def _path(value: str) -> str:
    return value


def _name_list(value: str) -> Tuple[str, ...]:
    return tuple(item.strip() for item in value.split(",") if item.strip())


def _integer(minimum: int = 0) -> Callable[[str], int]:
    def parse(value: str) -> int:
        try:
            number = int(value)
        except ValueError:
            raise ValueError(f"expected an integer, got {value!r}")
        if number < minimum:
            raise ValueError(f"must be >= {minimum}, got {number}")
        return number
    return parse


def _number(low: float = -np.inf, high: float = np.inf, low_open: bool = False, high_open: bool = False):
    def parse(value: str) -> float:
        try:
            number = float(value)
        except ValueError:
            raise ValueError(f"expected a number, got {value!r}")
        if not np.isfinite(number):
            raise ValueError(f"must be finite, got {value!r}")
        if number < low or (low_open and number == low) or number > high or (high_open and number == high):
            left = "(" if low_open else "["
            right = ")" if high_open else "]"
            raise ValueError(f"must lie in {left}{low:g}, {high:g}{right}, got {number:g}")
        return number
    return parse


def _choice(options: Tuple[str, ...]) -> Callable[[str], str]:
    def parse(value: str) -> str:
        if value not in options:
            raise ValueError(f"must be one of {', '.join(options)}, got {value!r}")
        return value
    return parse


def _components(value: str) -> Tuple[str, ...]:
    names = _name_list(value)
    unknown = [n for n in names if n not in COMPONENT_MULTIPLIERS]
    if unknown:
        raise ValueError(f"unknown components {', '.join(unknown)}; expected {', '.join(COMPONENT_MULTIPLIERS)}")
    if "environment" not in names:
        raise ValueError("the environment component is required")
    return names


def _interactions(value: str) -> Tuple[Tuple[str, str], ...]:
    pairs = []
    for item in _name_list(value):
        parts = [p.strip() for p in item.split("*")]
        if len(parts) != 2 or not all(parts):
            raise ValueError(f"interaction {item!r} must be written a*b")
        pairs.append((parts[0], parts[1]))
    return tuple(pairs)


def _number_list(value: str) -> Tuple[float, ...]:
    try:
        return tuple(float(v) for v in value.replace("|", ",").split(",") if v.strip())
    except ValueError:
        raise ValueError(f"expected a comma-separated list of numbers, got {value!r}")


def _matrix(value: str) -> np.ndarray:
    rows = [_number_list(row) for row in value.split(";") if row.strip()]
    if not rows or any(len(r) != len(rows) for r in rows):
        raise ValueError("matrix must be square, rows separated by ';'")
    matrix = np.array(rows)
    if not np.allclose(matrix, matrix.T):
        raise ValueError("matrix must be symmetric")
    if np.linalg.eigvalsh(matrix)[0] < -1e-10:
        raise ValueError("matrix must be positive semidefinite")
    return matrix


def _effects(value: str) -> Tuple[Tuple[int, Tuple[float, ...]], ...]:
    effects = []
    for item in _name_list(value):
        if ":" not in item:
            raise ValueError(f"effect {item!r} must be written snp_index:b1|b2")
        index, betas = item.split(":", 1)
        effects.append((_integer(0)(index.strip()), _number_list(betas)))
    return tuple(effects)


def _sim_covariates(value: str) -> Tuple[Tuple[str, ...], ...]:
    specs = []
    for item in _name_list(value):
        parts = [p.strip() for p in item.split(":")]
        if len(parts) < 3:
            raise ValueError(f"simulated covariate {item!r} must be written name:kind:effects[:mean[:sd]]")
        specs.append(tuple(parts))
    return tuple(specs)


def _format(value: Any) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any = None
    is_path: bool = False


MAIN_KEYS: Dict[str, Key] = {
    'pedigree_file': Key(_path, is_path=True),
    'genotype_file': Key(_name_list, is_path=True),
    'phenotype_file': Key(_path, is_path=True),
    'id_column': Key(_text),
    'traits': Key(_name_list),
    'covariates': Key(_name_list, ()),
    'interactions': Key(_interactions, ()),
    'constrain_equal': Key(_name_list, ()),
    'kinship_mode': Key(_choice(KINSHIP_MODES), "theoretical"),
    'components': Key(_components, ("additive", "environment")),
    'maf_min': Key(_number(0.0, 0.5, high_open=True), 0.01),
    'call_rate_min': Key(_number(0.0, 1.0, low_open=True), 0.98),
    'top_k': Key(_integer(0), 10),
    'threads': Key(_integer(1)),
    'seed': Key(_integer(0), 0),
    'sig_level': Key(_number(0.0, 1.0, True, True), 0.05),
    'fdr_level': Key(_number(0.0, 1.0, True, True), 0.05),
    'hwe_suspect': Key(_number(0.0, 1.0), 1e-8),
    'block_size': Key(_integer(1), 4096),
    'x_male_dosage': Key(_choice(("0/2", "0/1")), "0/2"),
    'x_kinship_null': Key(_choice(("yes", "no")), "yes"),
    'lambda_max': Key(_number(0.0, low_open=True), 1.1),
    'max_iter': Key(_integer(1), 1000),
    'tol': Key(_number(0.0, low_open=True), 1e-8),
    'output_dir': Key(_path, "pedqtl_output", is_path=True),
    'batch_trait_list': Key(_path, is_path=True),
    'batch_annotation_file': Key(_path, is_path=True),
}

SIMULATION_KEYS: Dict[str, Key] = {
    'replicates': Key(_integer(1), 200),
    'founder_maf': Key(_number_list),
    'effects': Key(_effects, ()),
    'traits': Key(_name_list, ()),
    'intercept': Key(_number_list, ()),
    'covariates': Key(_sim_covariates, ()),
    'sigma_additive': Key(_matrix),
    'sigma_dominance': Key(_matrix),
    'sigma_household': Key(_matrix),
    'sigma_x_additive': Key(_matrix),
    'sigma_environment': Key(_matrix),
    'alpha': Key(_number(0.0, 1.0, True, True)),
    'test': Key(_choice(("score", "lrt")), "score"),
}

REQUIRED_KEYS: Dict[str, Tuple[str, ...]] = {
    'scan': ('pedigree_file', 'genotype_file', 'phenotype_file', 'traits'),
    'batch': ('pedigree_file', 'genotype_file', 'phenotype_file', 'batch_trait_list'),
    'kinship': ('pedigree_file',),
    'power': ('pedigree_file', 'simulation.founder_maf', 'simulation.sigma_environment'),
}


@dataclass
class ControlFile:
    """Typed control values; simulation keys are stored as 'simulation.<key>'"""
    values: Dict[str, Any] = field(default_factory=dict)
    raw: Dict[str, str] = field(default_factory=dict)
    source: Optional[str] = None

    def get(self, key: str, default: Any = None) -> Any:
        value = self.values.get(key)
        return default if value is None else value

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def __contains__(self, key: str) -> bool:
        return self.values.get(key) is not None

    @property
    def output_dir(self) -> str:
        return self.values['output_dir']

    def output_path(self, *parts: str) -> str:
        return os.path.join(self.output_dir, *parts)

    def require(self, subcommand: str) -> None:
        """Raise ConfigError naming the first required key that is missing"""
        for key in REQUIRED_KEYS[subcommand]:
            if key not in self:
                raise ConfigError(f"Control file is missing required key '{key}' for {subcommand}")
        if subcommand == "kinship" and self.values['kinship_mode'] != "theoretical" and 'genotype_file' not in self:
            raise ConfigError(
                f"Control file is missing required key 'genotype_file' for kinship_mode {self.values['kinship_mode']}"
            )

    def override(self, threads: Optional[int] = None, seed: Optional[int] = None) -> None:
        if threads is not None:
            if threads < 1:
                raise ConfigError("--threads must be at least 1")
            self.values['threads'] = threads
            self.raw['threads'] = str(threads)
        if seed is not None:
            if seed < 0:
                raise ConfigError("--seed must be >= 0")
            self.values['seed'] = seed
            self.raw['seed'] = str(seed)

    def resolved_text(self) -> str:
        lines = ["# resolved pedqtl control file"]
        for key in MAIN_KEYS:
            if key in self.raw:
                lines.append(f"{key} = {self.raw[key]}")
        simulation = [k for k in SIMULATION_KEYS if f"{SIMULATION_SECTION}.{k}" in self.raw]
        if simulation:
            lines.append("")
            lines.append(f"[{SIMULATION_SECTION}]")
            for key in simulation:
                lines.append(f"{key} = {self.raw[f'{SIMULATION_SECTION}.{key}']}")
        return "\n".join(lines) + "\n"

    def write_resolved(self) -> str:
        os.makedirs(self.output_dir, exist_ok=True)
        path = self.output_path(RESOLVED_NAME)
        with open(path, 'w') as f:
            f.write(self.resolved_text())
        return path


def _resolve_path(value: Any, base: str) -> Any:
    if isinstance(value, tuple):
        return tuple(_resolve_path(v, base) for v in value)
    return value if os.path.isabs(value) else os.path.normpath(os.path.join(base, value))


def parse_control_text(text: str, base_dir: str = ".", source: Optional[str] = None) -> ControlFile:
    """
    Parse control file text

    Args:
        text: Control file contents
        base_dir: Directory relative paths are resolved against
        source: File name used in error messages

    Raises:
        ConfigError: unknown key, duplicate key, malformed line or invalid value
    """
    where = source or "control file"
    values: Dict[str, Any] = {}
    raw: Dict[str, str] = {}
    section = ""
    for number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if content.startswith("[") and content.endswith("]"):
            section = content[1:-1].strip()
            if section != SIMULATION_SECTION:
                raise ConfigError(f"{where}:{number}: unknown section [{section}]")
            continue
        if "=" not in content:
            raise ConfigError(f"{where}:{number}: expected 'key = value', got {line.strip()!r}")
        key, value = (part.strip() for part in content.split("=", 1))
        schema = SIMULATION_KEYS if section else MAIN_KEYS
        if key not in schema:
            scope = f"[{section}] " if section else ""
            raise ConfigError(f"{where}:{number}: unknown {scope}key '{key}'")
        full_key = f"{section}.{key}" if section else key
        if full_key in values:
            raise ConfigError(f"{where}:{number}: key '{key}' given twice")
        try:
            parsed = schema[key].parse(value)
        except ValueError as e:
            raise ConfigError(f"{where}:{number}: invalid value for '{key}': {e}") from e
        if schema[key].is_path:
            parsed = _resolve_path(parsed, base_dir)
            value = _format(parsed)
        values[full_key] = parsed
        raw[full_key] = value

    defaults = [(key, spec) for key, spec in MAIN_KEYS.items()]
    if any(k.startswith(f"{SIMULATION_SECTION}.") for k in values):
        defaults += [(f"{SIMULATION_SECTION}.{key}", spec) for key, spec in SIMULATION_KEYS.items()]
    for key, spec in defaults:
        if key not in values and spec.default is not None:
            value = _resolve_path(spec.default, base_dir) if spec.is_path else spec.default
            values[key] = value
            if value != ():
                raw[key] = _format(value)
    if 'threads' not in values:
        values['threads'] = default_thread_count()
        raw['threads'] = str(values['threads'])
        logger.debug(f"threads = {values['threads']} (from {THREADS_ENV_VAR} or the machine core count)")
    return ControlFile(values=values, raw=raw, source=source)


def read_control_file(path: str) -> ControlFile:
    if not os.path.isfile(path):
        raise ConfigError(f"Control file not found: {path}")
    with open(path) as f:
        text = f.read()
    return parse_control_text(text, base_dir=os.path.dirname(os.path.abspath(path)), source=path)
