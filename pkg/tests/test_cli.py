"""End-to-end command line tests, driven in process through cli.main."""

import json
import os

import numpy as np
import pytest

from t2vlad import data as D
from t2vlad import graph as G
from t2vlad.cli import DEFAULT_CONFIG, main, merge_config
from t2vlad.errors import ConfigError

TINY = {
    "model": {"dim": 12, "k": 2, "heads": 2, "dropout": 0.0, "max_tokens": 8},
    "train": {"batch_size": 4, "epochs": 2, "lr": 5e-3},
    "synth": {"num_pairs": 10, "num_topics": 3, "experts": ["motion", "audio"],
              "dims": [8, 6], "latent_dim": 10, "segment_range": [3, 5],
              "token_range": [4, 7], "max_segments": 5, "max_tokens": 8,
              "text_dim": 10, "holdout": 3},
}


@pytest.fixture(autouse=True)
def keep_default_dtype():
    # --precision single flips a process-wide default; undo it per test
    before = G.get_default_dtype()
    yield
    G.set_default_dtype(before)


def write_config(path, doc=TINY):
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One gen-synth + train pass shared by the read-only command tests."""
    root = tmp_path_factory.mktemp("cliws")
    cfg = write_config(root / "run.json")
    data_dir = root / "data"
    assert main(["gen-synth", "--config", cfg, "--out", str(data_dir)]) == 0
    run_dir = root / "run"
    assert main(["train", "--config", cfg,
                 "--manifest", str(data_dir / "train_manifest.json"),
                 "--val-manifest", str(data_dir / "test_manifest.json"),
                 "--out", str(run_dir)]) == 0
    return {
        "cfg": cfg,
        "manifest": str(data_dir / "manifest.json"),
        "train_manifest": str(data_dir / "train_manifest.json"),
        "test_manifest": str(data_dir / "test_manifest.json"),
        "checkpoint": str(run_dir / "last.ckpt"),
        "log": str(run_dir / "train_log.jsonl"),
        "root": root,
    }


# ----- config plumbing -----


def test_merge_config_defaults_and_overrides():
    merged = merge_config(DEFAULT_CONFIG, {"train": {"lr": 0.5}})
    assert merged["train"]["lr"] == 0.5
    assert merged["train"]["epochs"] == DEFAULT_CONFIG["train"]["epochs"]
    assert merged["model"] == DEFAULT_CONFIG["model"]
    with pytest.raises(ConfigError, match="/trian"):
        merge_config(DEFAULT_CONFIG, {"trian": {}})
    with pytest.raises(ConfigError, match="/train/lr"):
        merge_config(DEFAULT_CONFIG, {"train": {"lr": "fast"}})
    with pytest.raises(ConfigError, match="/train/epochs"):
        merge_config(DEFAULT_CONFIG, {"train": {"epochs": True}})


def test_usage_errors_exit_1(capsys, tmp_path):
    assert run(capsys, )[0] == 1
    assert run(capsys, "train", "--bogus")[0] == 1
    assert run(capsys, "gen-synth", "--pairs", "0", "--out", str(tmp_path))[0] == 1
    bad = tmp_path / "bad.json"
    bad.write_text('{"trian": {}}', encoding="utf-8")
    code, _out, err = run(capsys, "train", "--config", str(bad))
    assert code == 1 and "/trian" in err
    bad.write_text('{"train": {"lr": "fast"}}', encoding="utf-8")
    code, _out, err = run(capsys, "train", "--config", str(bad))
    assert code == 1 and "/train/lr" in err
    bad.write_text("{not json", encoding="utf-8")
    assert run(capsys, "train", "--config", str(bad))[0] == 1


def test_missing_inputs_exit_codes(capsys, tmp_path, workspace):
    # evaluate without --checkpoint is a usage problem, 1
    code, _out, err = run(capsys, "evaluate", "--manifest", workspace["test_manifest"])
    assert code == 1 and "checkpoint" in err
    # a checkpoint path that does not exist is a data problem, 2
    code, _out, err = run(capsys, "evaluate", "--checkpoint", str(tmp_path / "no.ckpt"),
                          "--manifest", workspace["test_manifest"])
    assert code == 2 and "not found" in err


# ----- gen-synth -----


def test_gen_synth_summary_and_split(capsys, tmp_path):
    cfg = write_config(tmp_path / "run.json")
    out = tmp_path / "ds"
    code, stdout, _err = run(capsys, "gen-synth", "--config", cfg, "--out", str(out))
    assert code == 0
    summary = json.loads(stdout)
    assert summary["items"] == 10
    assert summary["experts"] == ["motion", "audio"]
    assert summary["train_items"] == 7 and summary["test_items"] == 3
    assert summary["separation"]["separation"] > 0.0
    for key in ("manifest", "train_manifest", "test_manifest"):
        assert os.path.exists(summary[key])


def test_gen_synth_is_deterministic(capsys, tmp_path):
    cfg = write_config(tmp_path / "run.json")
    outs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        assert run(capsys, "gen-synth", "--config", cfg, "--out", str(out))[0] == 0
        outs.append(out)
    m0 = (outs[0] / "manifest.json").read_bytes()
    m1 = (outs[1] / "manifest.json").read_bytes()
    assert m0 == m1
    blob = "blobs/vid3.motion.f32"
    assert (outs[0] / blob).read_bytes() == (outs[1] / blob).read_bytes()


# ----- train -----


def test_train_emits_summary_and_log(capsys, workspace):
    # rerun a fresh short training to capture its stdout
    out = workspace["root"] / "run2"
    code, stdout, _err = run(capsys, "train", "--config", workspace["cfg"],
                             "--manifest", workspace["train_manifest"],
                             "--epochs", "1", "--out", str(out))
    assert code == 0
    info = json.loads(stdout)
    assert info["epochs_run"] == 1
    assert np.isfinite(info["final_train_loss"])
    assert os.path.exists(info["checkpoint"])
    with open(info["log"], encoding="utf-8") as fh:
        recs = [json.loads(line) for line in fh]
    assert [r["epoch"] for r in recs] == [0]
    assert recs[0]["ablation"] == "none"


def test_train_demo_mode_generates_data(capsys, tmp_path):
    cfg = write_config(tmp_path / "run.json")
    out = tmp_path / "demo"
    code, stdout, err = run(capsys, "train", "--config", cfg,
                            "--epochs", "1", "--out", str(out))
    assert code == 0
    assert "synthetic demo" in err
    assert (out / "data" / "train_manifest.json").exists()
    assert (out / "data" / "test_manifest.json").exists()
    assert json.loads(stdout)["epochs_run"] == 1


def test_train_ablation_flag_is_logged(capsys, tmp_path):
    cfg = write_config(tmp_path / "run.json")
    out = tmp_path / "abl"
    code, _stdout, _err = run(capsys, "train", "--config", cfg, "--epochs", "1",
                              "--ablation", "separate_vlad", "--out", str(out))
    assert code == 0
    with open(out / "train_log.jsonl", encoding="utf-8") as fh:
        recs = [json.loads(line) for line in fh]
    assert all(r["ablation"] == "separate_vlad" for r in recs)


# ----- evaluate -----


def test_evaluate_reports_both_directions(capsys, workspace):
    code, stdout, _err = run(capsys, "evaluate",
                             "--checkpoint", workspace["checkpoint"],
                             "--manifest", workspace["test_manifest"])
    assert code == 0
    rep = json.loads(stdout)
    assert set(rep) == {"t2v", "v2t"}
    for side in rep.values():
        assert set(side) == {"direction", "r1", "r5", "r10", "r50", "mdr", "num_queries"}
        assert side["num_queries"] == 3
        assert 1 <= side["mdr"] <= 3


def test_evaluate_single_precision(capsys, workspace):
    code, stdout, _err = run(capsys, "evaluate", "--precision", "single",
                             "--checkpoint", workspace["checkpoint"],
                             "--manifest", workspace["test_manifest"])
    assert code == 0
    assert G.get_default_dtype() == np.float32
    json.loads(stdout)


def test_evaluate_rejects_truncated_blob(capsys, workspace, tmp_path):
    # copy the dataset, then chop a blob the manifest still promises
    import shutil
    src = os.path.dirname(workspace["manifest"])
    dst = tmp_path / "broken"
    shutil.copytree(src, dst)
    victim = next((dst / "blobs").glob("*.motion.f32"))
    victim.write_bytes(victim.read_bytes()[:-4])
    code, _stdout, err = run(capsys, "evaluate",
                             "--checkpoint", workspace["checkpoint"],
                             "--manifest", str(dst / "manifest.json"))
    assert code == 2
    assert "bytes" in err


# ----- retrieve -----


def test_retrieve_by_caption_ranks_all(capsys, workspace):
    with open(workspace["test_manifest"], encoding="utf-8") as fh:
        doc = json.load(fh)
    cid = doc["items"][0]["captions"][0]["caption_id"]
    code, stdout, _err = run(capsys, "retrieve",
                             "--checkpoint", workspace["checkpoint"],
                             "--manifest", workspace["test_manifest"],
                             "--caption-id", cid, "--top-k", "3")
    assert code == 0
    out = json.loads(stdout)
    assert out["query"] == cid
    scores = [r["score"] for r in out["results"]]
    assert len(scores) == 3
    assert scores == sorted(scores, reverse=True)
    ids = {it["video_id"] for it in doc["items"]}
    assert all(r["video_id"] in ids for r in out["results"])


def test_retrieve_by_blob_and_query_errors(capsys, workspace, tmp_path):
    blob = tmp_path / "query.f32"
    gen = np.random.default_rng(5)
    D.save_tensor_blob(str(blob), gen.normal(size=(5, 10)))
    code, stdout, _err = run(capsys, "retrieve",
                             "--checkpoint", workspace["checkpoint"],
                             "--manifest", workspace["test_manifest"],
                             "--query-blob", str(blob), "--query-tokens", "5")
    assert code == 0
    assert len(json.loads(stdout)["results"]) == 3
    # exactly one query source is allowed
    assert run(capsys, "retrieve", "--checkpoint", workspace["checkpoint"],
               "--manifest", workspace["test_manifest"])[0] == 1
    assert run(capsys, "retrieve", "--checkpoint", workspace["checkpoint"],
               "--manifest", workspace["test_manifest"],
               "--caption-id", "x", "--query-blob", str(blob))[0] == 1
    # token count that does not divide the blob is a data problem
    code, _stdout, err = run(capsys, "retrieve",
                             "--checkpoint", workspace["checkpoint"],
                             "--manifest", workspace["test_manifest"],
                             "--query-blob", str(blob), "--query-tokens", "3")
    assert code == 2 and "multiple" in err
    # wrong feature width
    D.save_tensor_blob(str(blob), gen.normal(size=(5, 7)))
    code, _stdout, err = run(capsys, "retrieve",
                             "--checkpoint", workspace["checkpoint"],
                             "--manifest", workspace["test_manifest"],
                             "--query-blob", str(blob), "--query-tokens", "5")
    assert code == 2 and "text_dim" in err
    # unknown caption id
    assert run(capsys, "retrieve", "--checkpoint", workspace["checkpoint"],
               "--manifest", workspace["test_manifest"],
               "--caption-id", "nope")[0] == 2


# ----- inspect -----


def test_inspect_writes_assignment_tables(capsys, workspace, tmp_path):
    with open(workspace["test_manifest"], encoding="utf-8") as fh:
        vid = json.load(fh)["items"][0]["video_id"]
    code, stdout, _err = run(capsys, "inspect",
                             "--checkpoint", workspace["checkpoint"],
                             "--manifest", workspace["test_manifest"],
                             "--item", vid, "--out", str(tmp_path))
    assert code == 0
    paths = json.loads(stdout)
    for key, label0 in (("video_csv", "motion[0]"), ("text_csv", "tok0")):
        with open(paths[key], encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        assert lines[0] == "label,center,weight"
        assert len(lines) > 1
        labels = {line.split(",")[0] for line in lines[1:]}
        assert label0 in labels
        # 2 VLAD centers plus the background column
        centers = {int(line.split(",")[1]) for line in lines[1:]}
        assert centers == {0, 1, 2}
    assert run(capsys, "inspect", "--checkpoint", workspace["checkpoint"],
               "--manifest", workspace["test_manifest"],
               "--item", "missing", "--out", str(tmp_path))[0] == 2
