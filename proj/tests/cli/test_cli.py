"""End-to-end checks of the tcip command line: schemas, determinism, exit codes."""

import json
import os
import pathlib
import subprocess

import jsonschema
import pytest
import referencing

CLI = os.environ.get("TCIP_CLI", "build/bin/tcip")
SCHEMAS = pathlib.Path(__file__).resolve().parents[2] / "docs" / "schemas"


def _registry():
    resources = []
    for p in SCHEMAS.glob("*.schema.json"):
        resources.append((p.name, referencing.Resource.from_contents(json.loads(p.read_text()))))
    return referencing.Registry().with_resources(resources)


REGISTRY = _registry()


def validate(doc, schema):
    contents = json.loads((SCHEMAS / schema).read_text())
    jsonschema.Draft202012Validator(contents, registry=REGISTRY).validate(doc)


def run(*args, root=None, check=True):
    env = dict(os.environ)
    if root is not None:
        env["TCIP_OUTPUT_ROOT"] = str(root)
    r = subprocess.run([CLI, *map(str, args)], capture_output=True, text=True, env=env)
    if check and r.returncode != 0:
        raise AssertionError(f"{args} exited {r.returncode}: {r.stderr}")
    return r


def load(path):
    return json.loads(pathlib.Path(path).read_text())


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    run("synth", "--pairs", 2, "--grid", 16, "--blobs", 6, "--out", "data", root=root)
    run("train", "--dataset", root / "data", "--steps", 2, "--patch", 5, "--quiet", "--out", "model", root=root)
    return root


def test_outputs_match_their_schemas(trained):
    root = trained
    validate(load(root / "data/manifest.json"), "manifest.schema.json")
    for name in ("fixed", "moving", "fixed_labels", "moving_labels", "gt_field"):
        header = load(root / f"data/pair_000/{name}.json")
        jsonschema.Draft202012Validator(
            {"$ref": "common.schema.json#/$defs/volume_header"}, registry=REGISTRY
        ).validate(header)
    validate(load(root / "model/train_report.json"), "train_report.schema.json")
    validate(load(root / "model/checkpoint.json")["config"], "config.schema.json")

    run("eval", "--checkpoint", root / "model/checkpoint.json", "--dataset", root / "data", "--out", "ev", root=root)
    report = load(root / "ev/report.json")
    validate(report, "report.schema.json")
    assert [p["id"] for p in report["pairs"]] == ["pair_000", "pair_001"]

    pair = root / "data/pair_000"
    run("register", "--checkpoint", root / "model/checkpoint.json", "--fixed", pair / "fixed", "--moving",
        pair / "moving", "--moving-labels", pair / "moving_labels", "--fixed-labels", pair / "fixed_labels",
        "--out", "reg", root=root)
    validate(load(root / "reg/trace.json"), "trace.schema.json")
    assert (root / "reg/field.raw").stat().st_size == 3 * 16**3 * 4

    run("ablate", "--preset", "window", "--dataset", root / "data", "--steps", 1, "--patch", 5, "--out", "abl",
        root=root)
    validate(load(root / "abl/ablation.json"), "ablation.schema.json")


def test_eval_reruns_are_byte_identical(trained):
    root = trained
    for out in ("a", "b"):
        run("eval", "--checkpoint", root / "model/checkpoint.json", "--dataset", root / "data", "--out", out,
            root=root)
    assert (root / "a/report.json").read_bytes() == (root / "b/report.json").read_bytes()
    assert (root / "a/report.txt").read_bytes() == (root / "b/report.txt").read_bytes()


def test_synth_zero_pairs_writes_empty_manifest(tmp_path):
    run("synth", "--pairs", 0, "--out", "empty", root=tmp_path)
    m = load(tmp_path / "empty/manifest.json")
    validate(m, "manifest.schema.json")
    assert m["pairs"] == []


def test_config_file_and_overrides(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({"data": {"synth": {"grid_size": 16, "num_blobs": 3}}}))
    run("synth", "--config", tmp_path / "cfg.json", "--pairs", 1, "--blobs", 5, "--out", "d", root=tmp_path)
    gen = load(tmp_path / "d/manifest.json")["generator"]
    assert gen["grid_size"] == 16
    assert gen["num_blobs"] == 5


def test_synth_is_deterministic(tmp_path):
    for out in ("x", "y"):
        run("synth", "--pairs", 1, "--grid", 16, "--out", out, root=tmp_path)
    assert (tmp_path / "x/pair_000/moving.raw").read_bytes() == (tmp_path / "y/pair_000/moving.raw").read_bytes()


def error_of(r):
    lines = r.stderr.strip().splitlines()
    doc = json.loads(lines[-1])
    validate(doc, "error.schema.json")
    return doc["error"]


@pytest.mark.parametrize(
    "args, code, kind",
    [
        (["frobnicate"], 2, "usage"),
        (["synth", "--grid", "24", "--out", "g"], 2, "config"),
        (["train", "--patch", "4", "--steps", "1", "--out", "g"], 2, "config"),
        (["train", "--dataset", "/nonexistent/dataset", "--out", "m"], 3, "io/unreadable"),
    ],
)
def test_failures_exit_nonzero_with_structured_stderr(tmp_path, args, code, kind):
    r = run(*args, root=tmp_path, check=False)
    assert r.returncode == code
    assert error_of(r)["kind"] == kind


def test_malformed_and_truncated_inputs(trained, tmp_path):
    root = trained
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    r = run("register", "--checkpoint", root / "model/checkpoint.json", "--fixed", bad, "--moving", bad,
            "--out", "r", root=tmp_path, check=False)
    assert (r.returncode, error_of(r)["kind"]) == (3, "io/malformed-header")

    pair = root / "data/pair_001"
    (tmp_path / "m.json").write_text((pair / "moving.json").read_text())
    (tmp_path / "m.raw").write_bytes((pair / "moving.raw").read_bytes()[:-4])
    r = run("register", "--checkpoint", root / "model/checkpoint.json", "--fixed", pair / "fixed", "--moving",
            tmp_path / "m", "--out", "r", root=tmp_path, check=False)
    assert (r.returncode, error_of(r)["kind"]) == (3, "io/truncated-payload")
