import argparse
import io
import shutil

import pytest

from aiwcpred.characterizer import characterize
from aiwcpred.cli import EMBED_PREFIX, build_parser, embed, embedded_features, main
from aiwcpred.microkernel import NDRange, execute, parse_kernel

from .helpers import KERNEL_DIR


def run(*argv):
    out = io.StringIO()
    code = main([str(a) for a in argv], out=out)
    return code, out.getvalue()


def _parsers(parser):
    yield parser
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                yield from _parsers(sub)


def test_every_flag_is_documented():
    for parser in _parsers(build_parser()):
        text = parser.format_help()
        for action in parser._actions:
            if isinstance(action, argparse._SubParsersAction):
                continue
            assert action.help, f"{parser.prog}: {action.dest} has no help text"
            for flag in action.option_strings:
                assert flag in text, f"{parser.prog}: {flag} missing from --help"


def test_help_exits_zero():
    assert run("--help")[0] == 0
    assert run("experiment", "heatmap", "--help")[0] == 0


@pytest.mark.parametrize("argv", [[], ["bogus"], ["train"], ["characterize", "--global", "1,2"],
                                  ["tune", "--start", "a,b,c"], ["experiment"]])
def test_usage_errors_exit_2(argv):
    assert run(*argv)[0] == 2


def test_characterize_one_row():
    code, text = run("characterize", KERNEL_DIR / "vector_add.mk", "--global", "8,1,1", "--local", "4,1,1")
    assert code == 0
    lines = text.splitlines()
    assert len(lines) == 1 and len(lines[0].split(",")) == 30
    assert lines[0].startswith("vector_add,vector_add,tiny,")


def test_characterize_trace_matches_in_process(tmp_path):
    src = KERNEL_DIR / "branchy.mk"
    trace_file = tmp_path / "t.jsonl"
    code, direct = run("characterize", src, "--global", "8,2,1", "--local", "4,1,1", "--history", "4",
                       "--save-trace", trace_file)
    assert code == 0
    code, replay = run("characterize", "--trace", trace_file, "--name", "branchy", "--history", "4")
    assert code == 0 and replay == direct
    fv = characterize(execute(parse_kernel(src.read_text()), NDRange((8, 2, 1), (4, 1, 1))), 4)
    assert [float(v) for v in direct.strip().split(",")[3:]] == pytest.approx(fv.as_list(), rel=1e-8)


def test_characterize_output_appends(tmp_path):
    out = tmp_path / "f.csv"
    for size in ("tiny", "small"):
        assert run("characterize", KERNEL_DIR / "vector_add.mk", "--size", size, "--output", out)[0] == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("application,kernel,size,") and len(lines) == 3


def test_embed_is_idempotent(tmp_path):
    k = tmp_path / "k.mk"
    shutil.copy(KERNEL_DIR / "reduce_sum.mk", k)
    original = k.read_text()
    argv = ("characterize", k, "--global", "8,1,1", "--local", "4,1,1", "--embed")
    assert run(*argv)[0] == 0
    once = k.read_text()
    assert once.startswith(EMBED_PREFIX)
    assert once.splitlines()[1:] == original.splitlines()
    assert run(*argv)[0] == 0
    assert k.read_text() == once
    payload = embedded_features(once)
    assert payload["global"] == [8, 1, 1] and len(payload["features"]) == 27
    assert embed(once, payload) == once


def test_characterize_errors(tmp_path):
    bad = tmp_path / "bad.mk"
    bad.write_text("frobnicate r0\nhalt\n")
    assert run("characterize", bad)[0] == 2
    div = tmp_path / "div.mk"
    div.write_text("div r0, r1, 0\nhalt\n")
    assert run("characterize", div)[0] == 3
    assert run("characterize", tmp_path / "missing.mk")[0] == 4
    assert run("characterize", "--trace", bad)[0] == 2


@pytest.fixture(scope="module")
def small_model(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("--seed", 3, "experiment", "synth", "--kernels", 4, "--devices", 3, "--out-dir", d)[0] == 0
    model = d / "m.aiwcf"
    code, text = run("--seed", 3, "train", "--features", d / "features.csv", "--runtimes", d / "runtimes.csv",
                     "--num-trees", 20, "--mtry", 10, "--model", model)
    assert code == 0 and "oob_error_pct=" in text
    return d, model


def test_rank_three_devices_ascending(small_model, tmp_path):
    d, model = small_model
    code, text = run("rank", "--model", model, "--features", d / "features.csv", "--row", 0)
    assert code == 0
    lines = text.splitlines()
    assert len(lines) == 3
    times = [float(line.split(",")[1]) for line in lines]
    assert times == sorted(times)
    # without --row, a multi-row file is ambiguous
    assert run("rank", "--model", model, "--features", d / "features.csv")[0] == 2


def test_predict_matches_rank(small_model):
    d, model = small_model
    _, ranked = run("rank", "--model", model, "--features", d / "features.csv", "--row", 1)
    for line in ranked.splitlines():
        device, seconds = line.split(",")
        code, text = run("predict", "--model", model, "--features", d / "features.csv", "--row", 1,
                         "--device", device)
        assert code == 0 and text.strip() == seconds


def test_predict_schema_mismatch_exits_5(small_model, tmp_path):
    d, model = small_model
    rows = (d / "features.csv").read_text().splitlines()
    header = rows[0].split(",")
    header[5] = "renamed_feature"
    other = tmp_path / "other.csv"
    other.write_text("\n".join([",".join(header), rows[1]]) + "\n")
    assert run("predict", "--model", model, "--features", other, "--device", "dev00")[0] == 5
    assert run("predict", "--model", model, "--features", d / "features.csv", "--device", "gpu99")[0] == 5


def test_predict_bad_model_file(small_model, tmp_path):
    d, _ = small_model
    junk = tmp_path / "junk.aiwcf"
    junk.write_bytes(b"not a model")
    assert run("predict", "--model", junk, "--features", d / "features.csv", "--device", "dev00")[0] == 2


def test_seed_from_environment(small_model, monkeypatch, tmp_path):
    d, _ = small_model
    data = ("--features", d / "features.csv", "--runtimes", d / "runtimes.csv")
    train = ("train", *data, "--num-trees", 5, "--mtry", 5)
    run("--seed", 11, *train, "--model", tmp_path / "a")
    monkeypatch.setenv("AIWC_PREDICT_SEED", "11")
    run(*train, "--model", tmp_path / "b")
    monkeypatch.setenv("AIWC_PREDICT_SEED", "12")
    run(*train, "--model", tmp_path / "c")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes() != (tmp_path / "c").read_bytes()
    monkeypatch.setenv("AIWC_PREDICT_SEED", "nope")
    assert run(*train, "--model", tmp_path / "d")[0] == 2


def test_tune_writes_trace_and_model(small_model, tmp_path):
    d, _ = small_model
    code, text = run("--seed", 1, "tune", "--features", d / "features.csv", "--runtimes", d / "runtimes.csv",
                     "--start", "20,10,9", "--num-trees-range", "10,40", "--fix", "min_node_size=9",
                     "--max-evaluations", 5, "--trace-out", tmp_path / "trace.csv", "--model", tmp_path / "m")
    assert code == 0 and "min_node_size=9" in text
    assert (tmp_path / "trace.csv").read_text().startswith("eval,num_trees,mtry")
    assert (tmp_path / "m").stat().st_size > 0
    assert run("tune", "--fix", "depth=3", "--max-evaluations", 2)[0] == 3


def _pipeline(root, seed=5):
    data = root / "data"
    assert run("--seed", seed, "experiment", "synth", "--kernels", 6, "--devices", 4, "--out-dir", data)[0] == 0
    files = ("--features", data / "features.csv", "--runtimes", data / "runtimes.csv")
    assert run("--seed", seed, "train", *files, "--num-trees", 30, "--model", root / "model.aiwcf")[0] == 0
    code, summary = run("--seed", seed, "experiment", "evaluate", *files, "--params", "30,20,9",
                        "--out-dir", root / "eval", "--jobs", 2, "--plot", "svg")
    assert code == 0 and "pairwise_accuracy=" in summary
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_pipeline_is_byte_identical(tmp_path):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    assert len(a) == 9
    assert a == b
    assert _pipeline(tmp_path / "c", seed=6) != a


@pytest.mark.parametrize("experiment, extra, outputs", [
    ("min-node-scan", ["--num-trees", 5, "--mtry", 5], ["min_node_scan.csv", "min_node_scan.svg"]),
    ("heatmap", ["--num-trees-range", "1,20", "--max-evaluations", 4], ["heatmap.csv", "heatmap_traces.csv",
                                                                          "heatmap.svg"]),
    ("loko", ["--start", "10,10,9", "--num-trees-range", "10,20", "--max-evaluations", 2], ["loko.csv"]),
    ("learning-curve", ["--samples", 2, "--params", "5,5,9"], ["learning_curve.csv", "learning_curve.svg"]),
])
def test_experiment_commands(small_model, tmp_path, experiment, extra, outputs):
    d, _ = small_model
    code, _ = run("experiment", experiment, "--features", d / "features.csv", "--runtimes", d / "runtimes.csv",
                  "--out-dir", tmp_path, "--plot", "svg", *extra)
    assert code == 0
    for name in outputs:
        assert (tmp_path / name).stat().st_size > 0
