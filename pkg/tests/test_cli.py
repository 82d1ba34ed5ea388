import json
from pathlib import Path

import pytest

from apebehaviour.cli import _train_cfg, build_parser, main
from apebehaviour.training import TrainConfig


def run(argv, tmp_path, capsys):
    code = main(["--runs-dir", str(tmp_path / "runs"), *argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def manifests(tmp_path):
    return [json.loads(p.read_text()) for p in sorted((tmp_path / "runs").glob("*/manifest.json"))]


def test_unknown_subcommand(tmp_path, capsys):
    code, _, err = run(["dance"], tmp_path, capsys)
    assert code == 2
    assert "usage:" in err
    assert json.loads(err.strip().splitlines()[-1])["error"] == "usage"


def test_train_defaults_are_reference_values():
    args = build_parser().parse_args(["train", "corpus"])
    assert _train_cfg(args) == TrainConfig()
    assert (args.seq_len, args.stride, args.threshold) == (20, 20, 72)
    assert (args.model, args.fusion, args.loss) == ("optimised", "late", "focal")


def test_help_lists_paper_defaults(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train", "--help"])
    text = capsys.readouterr().out
    for needle in ("paper default: 1e-4", "paper default: 0.9", "paper default: 0.01", "paper default: 9"):
        assert needle in text


def test_crossval_plan_on_500_videos(tmp_path, capsys):
    root = tmp_path / "big"
    for i in range(500):
        (root / f"v{i:03d}" / "annotations").mkdir(parents=True)
    code, out, _ = run(["crossval", str(root), "--folds", "4", "--seed", "0", "--plan-only"], tmp_path, capsys)
    assert code == 0
    assert out.count("train 375\ttest 125") == 4
    (m,) = manifests(tmp_path)
    assert m["command"] == "crossval" and m["outputs"]["folds"] == [[375, 125]] * 4


def test_validate_and_manifest(tiny_corpus, tmp_path, capsys):
    code, out, _ = run(["validate", str(tiny_corpus), "--out", str(tmp_path / "rep")], tmp_path, capsys)
    assert code == 0 and "violations=0" in out
    assert (tmp_path / "rep.json").exists()
    (m,) = manifests(tmp_path)
    assert m["exit_status"] == 0 and len(m["inputs_sha256"]) == 64
    assert m["config"]["corpus"] == str(tiny_corpus)


def test_validate_reports_violations(tmp_path, capsys):
    from apebehaviour.annotations import ApeInstance, BehaviourLabel, BoundingBox, FrameAnnotation, VideoAnnotation
    from apebehaviour.annotations import write_video

    frames = [FrameAnnotation("v", t, [ApeInstance(0, BehaviourLabel.SITTING, BoundingBox(0, 0, 90, 9))])
              for t in range(3)]
    write_video(tmp_path / "bad", VideoAnnotation("v", frames, 24, 32, 32))
    code, _, err = run(["validate", str(tmp_path / "bad")], tmp_path, capsys)
    assert code == 1
    assert json.loads(err.strip().splitlines()[-1])["error"] == "validation"


def test_runtime_failure_is_exit_1(tmp_path, capsys):
    code, _, err = run(["eval", str(tmp_path / "missing.pt"), str(tmp_path)], tmp_path, capsys)
    assert code == 1
    assert json.loads(err.strip().splitlines()[-1])["error"] == "FileNotFoundError"
    assert manifests(tmp_path)[0]["exit_status"] == 1


def test_gen_from_yaml(tmp_path, capsys):
    cfg = tmp_path / "gen.yaml"
    cfg.write_text(f"num_videos: 2\nframes_per_video: 30\nsegment_frames: 30\nmin_segment_frames: 10\n"
                   f"out_dir: {tmp_path / 'gen'}\n")
    code, out, _ = run(["gen", str(cfg)], tmp_path, capsys)
    assert code == 0 and "generated 2 videos" in out
    assert (tmp_path / "gen" / "vid001" / "frames" / "frame_000029.png").exists()


def test_config_file_overrides_flags(tiny_corpus, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seq_len": 4, "stride": 4, "threshold": 8}))
    code, out, _ = run(["--config", str(cfg), "sample", str(tiny_corpus), "--seq-len", "6",
                        "--out", str(tmp_path / "m.jsonl")], tmp_path, capsys)
    assert code == 0
    header = json.loads((tmp_path / "m.jsonl").read_text().splitlines()[0])
    assert header["sampler_config"]["sequence_length"] == 4


def test_unknown_config_key(tiny_corpus, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"learning_speed": 3}))
    code, _, _ = run(["--config", str(cfg), "stats", str(tiny_corpus)], tmp_path, capsys)
    assert code == 2


def test_train_eval_render_round_trip(tiny_corpus, tmp_path, capsys):
    small = ["--seq-len", "4", "--stride", "4", "--threshold", "8", "--crop-size", "16"]
    ckpt_dir = tmp_path / "ck"
    code, out, err = run(["train", str(tiny_corpus), *small, "--epochs", "1", "--batch", "4", "--no-balanced",
                          "--no-pretrained", "--lr", "1e-3", "--out", str(ckpt_dir)], tmp_path, capsys)
    assert code == 0, err
    code, out, err = run(["eval", str(ckpt_dir / "best.pt"), str(tiny_corpus), "--split", "all",
                          "--out", str(tmp_path / "ev")], tmp_path, capsys)
    assert code == 0, err
    assert "Top1 Accuracy" in out
    from apebehaviour.data import Corpus

    from .conftest import TINY_SAMPLER

    expected = len(Corpus(tiny_corpus).samples(TINY_SAMPLER))
    assert expected == 9 * 6 + 6  # six windows per video plus the carrier adult's walking track
    assert json.loads((tmp_path / "ev.json").read_text())["count"] == expected
    code, out, err = run(["render", str(ckpt_dir / "best.pt"), str(tiny_corpus), "vid000",
                          "--out", str(tmp_path / "skim")], tmp_path, capsys)
    assert code == 0, err
    assert len(list(Path(tmp_path / "skim" / "vid000").glob("frame_*.png"))) == 24
    assert [m["command"] for m in manifests(tmp_path)] == ["train", "eval", "render"]
