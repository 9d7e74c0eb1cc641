import os
import shutil

import pandas as pd
import pytest

from conftest import PEDIGREE_HEADER, control_text, nuclear_family_rows, write_text
from pedqtl import __version__
from pedqtl.cli import build_parser, main


def _run(tmp_path, text, command="scan", *extra):
    path = write_text(tmp_path / "run.ctl", text)
    return main([command, "--control", path, "--no-progress", *extra])


def test_parser_requires_control():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["scan"])


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args(["--version"])
    assert info.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_scan_end_to_end(tmp_path, study):
    out = str(tmp_path / "out")
    assert _run(tmp_path, control_text(study, out), "scan", "--threads", "1") == 0
    for name in ("control.resolved", "scan.tsv", "top_hits.tsv", "top_hits.txt", "manhattan.svg", "manhattan.tsv",
                 "manhattan_thresholds.tsv", "qq.svg", "qq.tsv", "null_summary.txt", "outliers.tsv",
                 "qc_report.txt", "qc_dropped.tsv", "timings.txt"):
        assert os.path.exists(os.path.join(out, name)), name
    assert "threads = 1" in open(os.path.join(out, "control.resolved")).read()
    scan = pd.read_csv(os.path.join(out, "scan.tsv"), sep="\t", dtype={'chr': str})
    assert len(scan) == study.genotypes.m
    top = open(os.path.join(out, "top_hits.txt")).read().splitlines()
    assert top[4].split("\t")[0] == study.causal_snp
    stages = pd.read_csv(os.path.join(out, "timings.txt"), sep="\t")["stage"].tolist()
    assert stages == ["ingest", "qc", "kinship", "null_fit", "scan", "report"]


def test_rerun_gives_identical_outputs(tmp_path, study):
    first, second = str(tmp_path / "a"), str(tmp_path / "b")
    assert _run(tmp_path, control_text(study, first, threads="1")) == 0
    assert _run(tmp_path, control_text(study, second, threads="3")) == 0
    for name in ("scan.tsv", "top_hits.txt", "manhattan.svg", "qq.svg"):
        with open(os.path.join(first, name), 'rb') as a, open(os.path.join(second, name), 'rb') as b:
            assert a.read() == b.read(), name


def test_missing_control_file(tmp_path):
    assert main(["scan", "--control", str(tmp_path / "absent.ctl")]) == 2


def test_missing_required_key(tmp_path, study):
    assert _run(tmp_path, control_text(study, str(tmp_path / "out"), genotype_file=None)) == 2


def test_unknown_key(tmp_path, study):
    assert _run(tmp_path, control_text(study, str(tmp_path / "out"), colour="blue")) == 2


def test_cyclic_pedigree_is_a_data_error(tmp_path, study, caplog):
    pedigree = write_text(tmp_path / "cycle.csv", PEDIGREE_HEADER + "F1,A,B,0,M,\nF1,B,A,0,M,\n")
    assert _run(tmp_path, control_text(study, str(tmp_path / "out"), pedigree_file=pedigree)) == 3
    assert "[ingest]" in caplog.text


def test_rank_deficient_model(tmp_path, study):
    frame = study.traits.copy()
    frame["one"] = 1.0
    phenotypes = str(tmp_path / "pheno.csv")
    frame.to_csv(phenotypes, index=False, na_rep="NA")
    text = control_text(study, str(tmp_path / "out"), phenotype_file=phenotypes, covariates="one")
    assert _run(tmp_path, text) == 4


def test_kinship_export(tmp_path, study):
    out = str(tmp_path / "kin")
    text = control_text(study, out, components="additive, dominance, x_additive, environment")
    assert _run(tmp_path, text, "kinship") == 0
    additive = pd.read_csv(os.path.join(out, "kernel_additive.tsv"), sep="\t")
    n = sum(p.size for p in study.pedigrees)
    assert len(additive) == n * (n + 1) // 2
    row = additive[(additive["id1"] == "F1_c1") & (additive["id2"] == "F1_fa")]
    assert row["value"].iloc[0] == pytest.approx(0.25)
    assert os.path.exists(os.path.join(out, "kernel_dominance.tsv"))
    x_kernel = pd.read_csv(os.path.join(out, "kernel_x_additive.tsv"), sep="\t").set_index(["id1", "id2"])["value"]
    # a son shares his X with his mother only
    assert x_kernel[("F1_c1", "F1_fa")] == 0.0
    assert x_kernel[("F1_c1", "F1_mo")] == pytest.approx(0.5)
    assert not os.path.exists(os.path.join(out, "kernel_environment.tsv"))


def _x_linked_copy(tmp_path, study):
    """The study genotypes with chromosome 2 relabelled X"""
    prefix = str(tmp_path / "xstudy")
    for ext in ("bed", "fam"):
        shutil.copyfile(f"{study.genotype_prefix}.{ext}", f"{prefix}.{ext}")
    bim = pd.read_csv(f"{study.genotype_prefix}.bim", sep="\t", header=None, dtype=str)
    bim[0] = bim[0].replace("2", "X")
    bim.to_csv(f"{prefix}.bim", sep="\t", header=False, index=False)
    return prefix


def test_x_linked_snps_get_their_own_null(tmp_path, study):
    prefix = _x_linked_copy(tmp_path, study)
    out = str(tmp_path / "x")
    assert _run(tmp_path, control_text(study, out, genotype_file=prefix)) == 0
    summary = open(os.path.join(out, "null_summary_x.txt")).read()
    assert "Sigma[x_additive] (multiplier 2, kernel x_kinship)" in summary
    scan = pd.read_csv(os.path.join(out, "scan.tsv"), sep="\t", dtype={'chr': str})
    assert set(scan["chr"]) == {"1", "X"}

    plain = str(tmp_path / "plain")
    assert _run(tmp_path, control_text(study, plain, genotype_file=prefix, x_kinship_null="no")) == 0
    assert not os.path.exists(os.path.join(plain, "null_summary_x.txt"))
    autosomal = str(tmp_path / "autosomal")
    assert _run(tmp_path, control_text(study, autosomal)) == 0
    assert not os.path.exists(os.path.join(autosomal, "null_summary_x.txt"))


def test_power_run(tmp_path):
    pedigree = write_text(tmp_path / "peds.csv", PEDIGREE_HEADER + nuclear_family_rows(12))
    out = str(tmp_path / "power")
    text = (
        f"pedigree_file = {pedigree}\n"
        f"output_dir = {out}\n"
        "threads = 2\n"
        "seed = 9\n"
        "[simulation]\n"
        "replicates = 2\n"
        "founder_maf = 0.3, 0.2\n"
        "effects = 0:1.0\n"
        "sigma_additive = 0.5\n"
        "sigma_environment = 0.5\n"
        "covariates = sex:sex:0.2\n"
    )
    assert _run(tmp_path, text, "power") == 0
    lines = open(os.path.join(out, "power.tsv")).read().splitlines()
    assert lines[0] == "# rng = PCG64"
    assert lines[1] == "# seed = 9"
    assert lines[2] == "# alpha = 0.025"
    table = pd.read_csv(os.path.join(out, "power.tsv"), sep="\t", comment="#")
    assert list(table["snp"]) == ["sim1", "sim2"]
    assert (table["replicates"] == 2).all()


def test_seed_override_changes_power_header(tmp_path):
    pedigree = write_text(tmp_path / "peds.csv", PEDIGREE_HEADER + nuclear_family_rows(8))
    out = str(tmp_path / "power")
    text = (
        f"pedigree_file = {pedigree}\noutput_dir = {out}\n[simulation]\nreplicates = 1\n"
        "founder_maf = 0.4\nsigma_environment = 1\n"
    )
    assert _run(tmp_path, text, "power", "--seed", "42") == 0
    assert open(os.path.join(out, "power.tsv")).read().splitlines()[1] == "# seed = 42"
