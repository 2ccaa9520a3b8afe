import math

import numpy as np
import pytest
import yaml

from imblab import app, utils
from imblab.app import EXIT_CONFIG, EXIT_OK
from imblab.dataset import load_dataset
from imblab.model import load_model
from imblab.theory import sign_descent_loss


###############
# run
################
def test_run_minimal(cli, read_csv, minimal_config, write_config, tmp_path):
    """Normal operation: a small sign descent run writes every output."""
    out = tmp_path / "out"
    assert cli("run", write_config(minimal_config), "--out", out) == EXIT_OK

    for name in (
        "config.resolved.json",
        "dataset/meta.json",
        "dataset/inputs.f64",
        "dataset/labels.u32",
        "trajectory_sign.csv",
        "mean_p_sign.csv",
        "blockstats_sign.csv",
        "correlation_sign.csv",
        "models/sign/W.f64",
        utils.MANIFEST_FILENAME,
    ):
        assert (out / name).is_file(), name

    trajectory = read_csv(out / "trajectory_sign.csv")
    assert list(trajectory["step"]) == [0, 2, 4, 6, 8, 10]
    assert not trajectory["diverged"].any()
    expected = [sign_descent_loss(2, 0.05 * t) for t in trajectory["step"]]
    np.testing.assert_allclose(trajectory["loss"], expected, rtol=1e-9)

    model = load_model(out / "models" / "sign")
    assert model.W.shape == (2, 2)
    assert model.bias is None
    manifest = utils.read_json(out / utils.MANIFEST_FILENAME)["files"]
    assert "trajectory_sign.csv" in manifest
    assert utils.MANIFEST_FILENAME not in manifest


def test_reruns_are_byte_identical(
    cli, minimal_config, write_config, tmp_path
):
    config = write_config(minimal_config)
    for out in ("first", "second"):
        assert cli("run", config, "--out", tmp_path / out) == EXIT_OK
    first = (tmp_path / "first" / utils.MANIFEST_FILENAME).read_bytes()
    second = (tmp_path / "second" / utils.MANIFEST_FILENAME).read_bytes()
    assert first == second


def test_run_default_output_dir(
    cli, minimal_config, write_config, tmp_path, monkeypatch
):
    monkeypatch.chdir(tmp_path)
    assert cli("run", write_config(minimal_config)) == EXIT_OK
    assert (tmp_path / "results" / "minimal" / "MANIFEST.json").is_file()


def test_run_with_grid_search(cli, read_csv, write_config, tmp_path):
    content = {
        "schema_version": 1,
        "kind": "softmax",
        "name": "searched",
        "dataset": {
            "generator": "simple_imbalanced",
            "counts": [6, 3, 1],
            "num_groups": 3,
        },
        "optimizers": [{"family": "gd"}],
        "steps": 20,
        "grid_search": {"seeds": [0], "grid": [0.1, 1.0, 10.0]},
        "analysis": {"correlation": {"threshold": 0.0}},
    }
    out = tmp_path / "out"
    assert cli("run", write_config(content), "--out", out) == EXIT_OK
    assert (out / "gridsearch_gd.csv").is_file()
    trajectory = read_csv(out / "trajectory_gd.csv")
    assert trajectory["alpha"].nunique() == 1
    assert trajectory["loss"].iloc[-1] < math.log(3)


@pytest.mark.parametrize(
    ("path", "value"),
    [
        (("optimizers", 0, "family"), "lbfgs"),
        (("dataset", "counts"), [0.2, 0.8]),
        (("schema_version",), 2),
    ],
)
def test_bad_config_exits_2(
    cli, minimal_config, write_config, tmp_path, path, value
) -> None:
    target = minimal_config
    for key in path[:-1]:
        target = target[key]
    target[path[-1]] = value
    config = write_config(minimal_config)
    assert cli("run", config, "--out", tmp_path / "out") == EXIT_CONFIG


def test_missing_config_exits_2(cli, tmp_path) -> None:
    assert cli("run", tmp_path / "absent.yaml") == EXIT_CONFIG


def test_heatmap_larger_than_the_dataset(
    cli, minimal_config, write_config, tmp_path
) -> None:
    minimal_config["analysis"] = {"heatmap": {"n_classes": 3, "n_dims": 2}}
    config = write_config(minimal_config)
    assert cli("run", config, "--out", tmp_path / "out") == EXIT_CONFIG


def test_quadratic_divergence_is_not_a_failure(
    cli, read_csv, write_config, tmp_path
) -> None:
    """A diverged run is flagged in its table and the command succeeds."""
    content = {
        "schema_version": 1,
        "kind": "quadratic",
        "quadratic": {
            "pi": [1.0, 0.5],
            "w0": [1.0, 1.0],
            "alpha": 0.5,
            "steps": 4,
        },
        "optimizers": [
            {"family": "gd", "alpha": 1e10},
            {"family": "sign", "alpha": 0.25},
        ],
        "steps": 100,
    }
    out = tmp_path / "out"
    assert cli("run", write_config(content), "--out", out) == EXIT_OK

    diverged = read_csv(out / "trajectory_gd.csv")
    assert diverged["diverged"].iloc[-1]
    assert math.isinf(diverged["loss"].iloc[-1])
    assert not read_csv(out / "trajectory_sign.csv")["diverged"].any()

    table = read_csv(out / "quadratic.csv")
    assert len(table) == 5 * 2
    np.testing.assert_array_equal(table["gd_simulated"], table["gd_closed"])


###############
# theory
################
def test_theory_single_row(cli, read_csv, tmp_path) -> None:
    out = tmp_path / "theory.csv"
    args = ("--c", 2, "--pi", 1.0, "--t-max", 0, "--dt", 0.1)
    assert cli("theory", *args, "--out", out) == EXIT_OK
    table = read_csv(out)
    assert len(table) == 1
    assert table["loss_gflow"].iloc[0] == pytest.approx(math.log(2))
    assert table["loss_sign"].iloc[0] == pytest.approx(math.log(2))


def test_theory_table(cli, read_csv, tmp_path) -> None:
    out = tmp_path / "nested" / "theory.csv"
    args = ("--c", 10, "--pi", 0.1, "--t-max", 2, "--dt", 0.001)
    assert cli("-v", "theory", *args, "--n-points", 11, "--out", out) == 0
    table = read_csv(out)
    assert list(table.columns) == [
        "c",
        "pi",
        "t",
        "a",
        "b",
        "loss_gflow",
        "loss_sign",
        "a_rk4",
        "abs_err",
    ]
    assert len(table) == 11
    assert table["t"].iloc[-1] == pytest.approx(2.0)
    assert table["abs_err"].max() < 1e-8
    assert table["loss_gflow"].is_monotonic_decreasing


@pytest.mark.parametrize(
    "flags",
    [
        ("--c", 1, "--pi", 0.5, "--t-max", 1, "--dt", 0.1),
        ("--c", 2, "--pi", 0, "--t-max", 1, "--dt", 0.1),
        ("--c", 2, "--pi", 0.5, "--t-max", -1, "--dt", 0.1),
        ("--c", 2, "--pi", 0.5, "--t-max", 1, "--dt", 0),
    ],
)
def test_theory_bad_flags_exit_2(cli, tmp_path, flags) -> None:
    assert cli("theory", *flags, "--out", tmp_path / "t.csv") == EXIT_CONFIG
    assert not (tmp_path / "t.csv").exists()


def test_theory_missing_flag() -> None:
    with pytest.raises(SystemExit) as err:
        app.main(["theory", "--c", "2"])
    assert err.value.code == 2


###############
# dataset gen
################
def test_dataset_gen(cli, tmp_path) -> None:
    spec = tmp_path / "spec.yaml"
    spec.write_text(yaml.safe_dump({"generator": "heavy_tailed", "m": 2}))
    assert cli("dataset", "gen", spec, "--out", tmp_path / "x") == 2

    spec.write_text(
        yaml.safe_dump({"generator": "heavy_tailed", "m": 2, "seed": 0})
    )
    out = tmp_path / "data"
    assert cli("dataset", "gen", spec, "--out", out) == EXIT_OK
    dataset = load_dataset(out)
    assert (dataset.n, dataset.d, dataset.c) == (8, 12, 3)
    assert set(utils.read_json(out / utils.MANIFEST_FILENAME)["files"]) == {
        "meta.json",
        "inputs.f64",
        "labels.u32",
    }


def test_dataset_gen_from_an_experiment(
    cli, minimal_config, write_config, tmp_path
) -> None:
    out = tmp_path / "data"
    config = write_config(minimal_config)
    assert cli("dataset", "gen", config, "--out", out) == EXIT_OK
    assert load_dataset(out).c == 2


###############
# replicate
################
def test_replicate_quadratic(cli, read_csv, tmp_path) -> None:
    out = tmp_path / "quadratic"
    assert cli("replicate", "quadratic", "--out", out) == EXIT_OK
    sign = read_csv(out / "trajectory_sign.csv")
    gd = read_csv(out / "trajectory_gd.csv")
    assert not gd["diverged"].iloc[-1]
    assert not sign["diverged"].iloc[-1]
    assert (out / "gridsearch_gd.csv").is_file()
    assert (out / "MANIFEST.json").is_file()
