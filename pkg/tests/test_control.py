import os

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from conftest import write_text
from pedqtl.control import RESOLVED_NAME, parse_control_text, read_control_file
from pedqtl.errors import ConfigError

BASIC = """\
# association scan
pedigree_file = data/peds.csv
genotype_file = geno/chr1, geno/chr2
phenotype_file = data/pheno.csv   # trailing comment
traits = SBP, DBP
covariates = sex, age=age_1|age_2
interactions = sex*age
constrain_equal = age
threads = 4
"""

SIMULATION = """\
pedigree_file = peds.csv
threads = 1
[simulation]
replicates = 50
founder_maf = 0.1, 0.3
sigma_additive = 0.4, 0.1; 0.1, 0.5
sigma_environment = 0.6, 0; 0, 0.5
effects = 0:0.5|0.2
covariates = sex:sex:0.3|0.1, age:normal:0.02|0:45:10
"""


def test_values_are_typed(tmp_path):
    control = parse_control_text(BASIC, base_dir=str(tmp_path))
    assert control['traits'] == ("SBP", "DBP")
    assert control['covariates'] == ("sex", "age=age_1|age_2")
    assert control['interactions'] == (("sex", "age"),)
    assert control['constrain_equal'] == ("age",)
    assert control['threads'] == 4
    assert control['pedigree_file'] == os.path.join(str(tmp_path), "data", "peds.csv")
    assert control['genotype_file'] == (os.path.join(str(tmp_path), "geno", "chr1"),
                                        os.path.join(str(tmp_path), "geno", "chr2"))


def test_defaults(tmp_path):
    control = parse_control_text(BASIC, base_dir=str(tmp_path))
    assert control['maf_min'] == 0.01
    assert control['call_rate_min'] == 0.98
    assert control['top_k'] == 10
    assert control['kinship_mode'] == "theoretical"
    assert control['components'] == ("additive", "environment")
    assert control['x_male_dosage'] == "0/2"
    assert control['x_kinship_null'] == "yes"
    assert control.output_dir == os.path.join(str(tmp_path), "pedqtl_output")
    assert 'batch_trait_list' not in control
    assert 'simulation.replicates' not in control


def test_threads_from_environment(monkeypatch):
    monkeypatch.setenv("PEDQTL_THREADS", "3")
    assert parse_control_text("traits = y\n")['threads'] == 3


@pytest.mark.parametrize("text,message", [
    ("trait = y\n", "unknown key 'trait'"),
    ("maf_min = 0.7\n", "maf_min"),
    ("top_k = -1\n", "top_k"),
    ("threads = two\n", "threads"),
    ("kinship_mode = ibs\n", "kinship_mode"),
    ("components = additive\n", "environment"),
    ("interactions = sex:age\n", "a\\*b"),
    ("traits = y\ntraits = z\n", "given twice"),
    ("[output]\n", "unknown section"),
    ("just words\n", "key = value"),
    ("[simulation]\nsigma_environment = 1, 2; 3, 4\n", "symmetric"),
    ("[simulation]\nsigma_environment = 1, 0, 0\n", "square"),
    ("[simulation]\nseed = 3\n", "unknown \\[simulation\\] key 'seed'"),
])
def test_invalid_control(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_control_text(text)


def test_error_names_line(tmp_path):
    path = write_text(tmp_path / "run.ctl", "traits = y\n\nbogus = 1\n")
    with pytest.raises(ConfigError, match="run.ctl:3"):
        read_control_file(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        read_control_file(str(tmp_path / "absent.ctl"))


def test_required_keys(tmp_path):
    control = parse_control_text("pedigree_file = p.csv\nphenotype_file = x.csv\ntraits = y\n")
    with pytest.raises(ConfigError, match="genotype_file"):
        control.require("scan")
    control.require("kinship")
    grm = parse_control_text("pedigree_file = p.csv\nkinship_mode = grm_global\n")
    with pytest.raises(ConfigError, match="genotype_file"):
        grm.require("kinship")
    with pytest.raises(ConfigError, match="simulation.founder_maf"):
        parse_control_text("pedigree_file = p.csv\n").require("power")


def test_simulation_section(tmp_path):
    control = parse_control_text(SIMULATION, base_dir=str(tmp_path))
    assert control['simulation.replicates'] == 50
    assert control['simulation.founder_maf'] == (0.1, 0.3)
    assert_array_equal(control['simulation.sigma_additive'], [[0.4, 0.1], [0.1, 0.5]])
    assert control['simulation.effects'] == ((0, (0.5, 0.2)),)
    assert control['simulation.covariates'] == (("sex", "sex", "0.3|0.1"), ("age", "normal", "0.02|0", "45", "10"))
    assert control['simulation.test'] == "score"
    control.require("power")


def _same_values(a, b):
    assert set(a.values) == set(b.values)
    for key, value in a.values.items():
        if isinstance(value, np.ndarray):
            assert_array_equal(value, b.values[key])
        else:
            assert value == b.values[key], key


@pytest.mark.parametrize("text", [BASIC, SIMULATION])
def test_resolved_echo_reparses_to_same_values(tmp_path, text):
    control = parse_control_text(text, base_dir=str(tmp_path))
    echoed = parse_control_text(control.resolved_text(), base_dir="/elsewhere")
    _same_values(control, echoed)


def test_write_resolved(tmp_path):
    control = parse_control_text(f"traits = y\noutput_dir = {tmp_path / 'out'}\n")
    path = control.write_resolved()
    assert path == str(tmp_path / "out" / RESOLVED_NAME)
    assert "traits = y" in open(path).read()


def test_override(tmp_path):
    control = parse_control_text(BASIC, base_dir=str(tmp_path))
    control.override(threads=8, seed=11)
    assert control['threads'] == 8 and control['seed'] == 11
    assert "threads = 8" in control.resolved_text()
    with pytest.raises(ConfigError):
        control.override(threads=0)
