import hashlib
import json
import shutil

import pytest

from ironymt.cli import main
from ironymt.errors import ConfigError, StateError
from ironymt.manifest import load_manifest, parse_manifest
from ironymt.metrics import read_metrics
from ironymt.pipeline import run

SMALL = ["--irony-rows", "60", "--aux-rows", "40", "--corpus-docs", "30", "--tweets", "60",
         "--epochs", "2", "--pretrain-epochs", "1"]


@pytest.fixture(scope="module")
def syn(tmp_path_factory):
    out = tmp_path_factory.mktemp("syn")
    assert main(["gen-synthetic", "--out", str(out), "--seed", "2", *SMALL]) == 0
    return out


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def copy_data(syn, dest):
    shutil.copytree(syn, dest, ignore=shutil.ignore_patterns("runs"))
    return dest


def test_gen_synthetic_outputs(syn):
    names = {p.name for p in syn.iterdir()}
    for task in ("gender", "age", "variety", "emotion", "sentiment"):
        assert {f"{task}_train.tsv", f"{task}_dev.tsv"} <= names
    assert {"irony_train.tsv", "irony_test.tsv", "generic.txt", "tweets.txt"} <= names
    assert {f"manifest-{k}.json" for k in ("gru", "st", "mt4", "mt5", "mt6", "1m-mt5", "1m-mt6")} <= names
    assert (syn / "irony_train.tsv").read_text().startswith("id\ttext\tlabel\n")


def test_manifest_validation(syn):
    good = json.loads((syn / "manifest-mt4.json").read_text())
    m = parse_manifest(good, syn)
    assert m.target.name == "irony" and [t.name for t in m.tasks][:2] == ["irony", "gender"]
    assert m.tasks[3].labels[0] == "Algeria"
    for broken, msg in [
        ({**good, "colour": 1}, "colour"),
        ({k: v for k, v in good.items() if k != "seed"}, "seed"),
        ({**good, "model": "lstm"}, "lstm"),
        ({**good, "tasks": good["tasks"] + [dict(good["tasks"][1])]}, "gender"),
        ({**good, "tasks": [dict(t, target=True) for t in good["tasks"]]}, "target"),
        ({**good, "tasks": [{"name": "irony", "train": "nowhere.tsv"}]}, "nowhere"),
        ({**good, "model": "encoder-st"}, "single task"),
    ]:
        with pytest.raises(ConfigError, match=msg):
            parse_manifest(broken, syn).validate()


def test_gru_run_summary_and_resume(syn, tmp_path):
    data = copy_data(syn, tmp_path / "d")
    m = load_manifest(data / "manifest-gru.json")
    summary = run(m)
    out = data / "runs" / "gru"
    assert summary["status"] == "ok"
    assert [p["name"] for p in summary["phases"]] == ["vocab", "train", "predict"]
    assert summary["inputs"]["irony_train.tsv"] == sha(data / "irony_train.tsv")
    on_disk = json.loads((out / "summary.json").read_text())
    assert on_disk == json.loads(json.dumps(summary))
    assert {"model.ckpt", "metrics.jsonl", "predictions.tsv", "vocab.txt"} <= {p.name for p in out.iterdir()}
    assert not (out / ".lock").exists()

    again = run(load_manifest(data / "manifest-gru.json"))
    assert {p["status"] for p in again["phases"]} == {"skipped"}

    # a changed input is detected and everything downstream reruns
    with open(data / "irony_train.tsv", "a", encoding="utf-8") as fh:
        fh.write("extra-1\tbada kulu\tironic\n")
    third = run(load_manifest(data / "manifest-gru.json"))
    assert third["inputs"]["irony_train.tsv"] != summary["inputs"]["irony_train.tsv"]
    assert {p["status"] for p in third["phases"]} == {"completed"}


def test_predictions_file_format(syn, tmp_path):
    data = copy_data(syn, tmp_path / "d")
    run(load_manifest(data / "manifest-gru.json"))
    lines = (data / "runs" / "gru" / "predictions.tsv").read_text().splitlines()
    test_ids = [ln.split("\t")[0] for ln in (data / "irony_test.tsv").read_text().splitlines()[1:]]
    assert [ln.split("\t")[0] for ln in lines] == test_ids
    ident, label, probs = lines[0].split("\t")
    assert label in ("ironic", "non-ironic")
    assert abs(sum(map(float, probs.split(","))) - 1) < 1e-9


@pytest.mark.parametrize("key", ["gru", "st"])
def test_rerun_in_fresh_directory_is_byte_identical(syn, tmp_path, key):
    outs = []
    for name in ("a", "b"):
        data = copy_data(syn, tmp_path / name)
        run(load_manifest(data / f"manifest-{key}.json"))
        outs.append(data / "runs" / key)
    for f in ("metrics.jsonl", "predictions.tsv", "model.ckpt"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f


def test_full_phase_order(syn, tmp_path):
    data = copy_data(syn, tmp_path / "d")
    summary = run(load_manifest(data / "manifest-1m-mt5.json"))
    assert [p["name"] for p in summary["phases"]] == [
        "vocab", "pretrain-1-generic", "pretrain-2-in-domain", "train", "predict"]
    out = data / "runs" / "1m-mt5"
    assert {r.task for r in read_metrics(out / "metrics.jsonl")} == {"irony", "gender", "age", "variety", "emotion"}
    assert len((out / "pretrain-2-in-domain.loss.tsv").read_text().splitlines()) == 1


def test_use_all_training_data(syn, tmp_path):
    data = copy_data(syn, tmp_path / "d")
    summary = run(load_manifest(data / "manifest-gru.json"), use_all_training_data=True)
    assert summary["use_all_training_data"] is True
    train_phase = next(p for p in summary["phases"] if p["name"] == "train")
    assert train_phase["best_epoch"] == 2


def test_lock_blocks_concurrent_run(syn, tmp_path):
    data = copy_data(syn, tmp_path / "d")
    out = data / "runs" / "gru"
    out.mkdir(parents=True)
    (out / ".lock").write_text("1234\n")
    with pytest.raises(StateError, match="locked"):
        run(load_manifest(data / "manifest-gru.json"))


def test_failure_is_recorded(syn, tmp_path, capsys):
    data = copy_data(syn, tmp_path / "d")
    (data / "irony_test.tsv").write_text("a\tone\nb\n", encoding="utf-8")
    assert main(["run", str(data / "manifest-gru.json")]) == 1
    assert "irony_test.tsv:2" in capsys.readouterr().err
    summary = json.loads((data / "runs" / "gru" / "summary.json").read_text())
    assert summary["status"] == "failed" and summary["failed_phase"] == "predict"
    assert (data / "runs" / "gru" / "model.ckpt").exists()


def test_subcommands_end_to_end(syn, tmp_path):
    vocab, out = tmp_path / "vocab.txt", tmp_path / "gru"
    assert main(["build-vocab", str(syn / "irony_train.tsv"), "--kind", "word", "--size", "500",
                 "--out", str(vocab)]) == 0
    assert main(["finetune", "--model", "gru", "--vocab", str(vocab), "--task", f"irony={syn / 'irony_train.tsv'}",
                 "--out", str(out), "--seed", "0", "--epochs", "2"]) == 0
    assert main(["evaluate", "--checkpoint", str(out / "model.ckpt"), "--vocab", str(vocab), "--task", "irony",
                 "--data", str(syn / "irony_test.tsv"), "--out", str(tmp_path / "test.jsonl")]) == 0
    assert read_metrics(tmp_path / "test.jsonl")[0].split == "test"
    assert main(["predict", "--checkpoint", str(out / "model.ckpt"), "--vocab", str(vocab), "--task", "irony",
                 "--input", str(syn / "irony_test.tsv"), "--out", str(tmp_path / "p.tsv")]) == 0
    assert len((tmp_path / "p.tsv").read_text().splitlines()) == 15


def test_pretrain_subcommand(syn, tmp_path):
    vocab = tmp_path / "sw.txt"
    assert main(["build-vocab", str(syn / "generic.txt"), "--kind", "subword", "--size", "300",
                 "--out", str(vocab)]) == 0
    ck = tmp_path / "g.ckpt"
    assert main(["pretrain", "--corpus", str(syn / "generic.txt"), "--vocab", str(vocab), "--out", str(ck),
                 "--seed", "0", "--epochs", "1", "--batch", "16", "--loss-trace", str(tmp_path / "t.tsv")]) == 0
    assert (tmp_path / "t.tsv").read_text().startswith("1\t")
    assert main(["pretrain", "--corpus", str(syn / "generic.txt"), "--vocab", str(vocab),
                 "--out", str(tmp_path / "r.ckpt"), "--seed", "0", "--epochs", "1", "--init", str(ck),
                 "--resume"]) == 0


def test_training_needs_seed(syn, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["finetune", "--model", "gru", "--vocab", "v", "--task", "irony=x", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_domain_errors_exit_nonzero(tmp_path, capsys):
    assert main(["build-vocab", str(tmp_path / "missing.txt"), "--kind", "word", "--size", "5",
                 "--out", str(tmp_path / "v")]) == 1
    (tmp_path / "empty.txt").write_text("\n")
    assert main(["build-vocab", str(tmp_path / "empty.txt"), "--kind", "word", "--size", "5",
                 "--out", str(tmp_path / "v")]) == 1
    assert capsys.readouterr().err.startswith("error:")
