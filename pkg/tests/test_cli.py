import json
import random

import pytest

from lyricgen import cli
from lyricgen.corpus import bundled_corpus_path, read_pairs_jsonl
from lyricgen.melody import parse_melody

from .conftest import OVERFIT_FLAGS

QUICK = ["--hidden", "8", "--embedding", "6", "--layers", "1", "--epochs", "2", "--seed", "3"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def quick_model(tmp_path, capsys):
    ckpt = tmp_path / "quick.json"
    code, out, _ = run(capsys, "train", "--checkpoint", ckpt, *QUICK)
    assert code == 0
    return ckpt


@pytest.fixture
def melody4(tmp_path):
    path = tmp_path / "song.mel"
    path.write_text(
        "N0.5 N0.5 R0.5 N0.5 N0.5 R0.5 N0.5 N0.5 R0.5 N1 N2\n"
        "N1 N1 N2\n"
        "N0.5 R0.5 N0.5 N0.5 N0.5 N2\n"
        "N2\n",
        encoding="utf-8")
    return path


def test_train_rejects_invalid_dropout(tmp_path, capsys):
    code, out, err = run(capsys, "train", "--checkpoint", tmp_path / "x.json", "--dropout", "1.5")
    assert code == 2
    assert "dropout_rate" in err and out == ""
    assert not (tmp_path / "x.json").exists()


def test_train_requires_checkpoint_and_existing_corpus(tmp_path, capsys):
    assert run(capsys, "train", *QUICK)[0] == 2
    code, _, err = run(capsys, "train", "--checkpoint", tmp_path / "c.json", "--corpus", tmp_path / "nope")
    assert code == 2 and "nope" in err


@pytest.mark.slow
def test_overfit_training_run(overfit_run):
    assert overfit_run["code"] == 0
    assert overfit_run["checkpoint"].exists()
    assert overfit_run["history"][-1]["mean_loss"] < 0.1
    assert len(overfit_run["history"]) <= 300


def test_fixed_seed_gives_identical_checkpoint_bytes(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run(capsys, "train", "--checkpoint", a, *QUICK)[0] == 0
    assert run(capsys, "train", "--checkpoint", b, *QUICK)[0] == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.log.jsonl").read_bytes() == (tmp_path / "b.log.jsonl").read_bytes()


def test_config_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# overrides\ndropout = 0.25\nsampling-prob = 0.05\nepochs = 1\n", encoding="utf-8")
    ckpt = tmp_path / "c.json"
    assert run(capsys, "train", "--config", cfg, "--checkpoint", ckpt, "--sampling-prob", "0.2",
               "--hidden", "4", "--embedding", "4", "--layers", "1")[0] == 0
    tc = json.loads(ckpt.read_text(encoding="utf-8"))["payload"]["extra"]["train_config"]
    assert (tc["dropout_rate"], tc["sampling_prob"], tc["epochs"]) == (0.25, 0.2, 1)
    assert (tc["batch_size"], tc["clip_norm"]) == (16, 1.0)

    js = tmp_path / "run.json"
    js.write_text(json.dumps({"dropout_rate": 1.5}), encoding="utf-8")
    code, _, err = run(capsys, "train", "--config", js, "--checkpoint", ckpt)
    assert code == 2 and "dropout_rate" in err
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = red\n", encoding="utf-8")
    code, _, err = run(capsys, "train", "--config", bad, "--checkpoint", ckpt)
    assert code == 2 and "colour" in err


def test_train_writes_figure_and_log(tmp_path, capsys):
    fig = tmp_path / "loss.png"
    code, out, _ = run(capsys, "train", "--checkpoint", tmp_path / "m.json", "--figure", fig, *QUICK)
    summary = json.loads(out)
    assert code == 0 and summary["epochs"] == 2 and summary["pairs"] == 50
    assert fig.read_bytes()[:4] == b"\x89PNG"
    assert len((tmp_path / "m.log.jsonl").read_text(encoding="utf-8").splitlines()) == 2


def test_generate_one_line_per_melody_line(quick_model, melody4, capsys):
    code, out, _ = run(capsys, "generate", "--checkpoint", quick_model, "--melody", melody4,
                       "--seed-text", "人", "--beam-width", "3")
    assert code == 0
    lines = out.splitlines()
    score = parse_melody(melody4.read_text(encoding="utf-8"))
    assert [len(line) for line in lines] == [sum(e.is_note for e in ln) for ln in score.lines]
    assert len(lines) == 4
    again = run(capsys, "generate", "--checkpoint", quick_model, "--melody", melody4,
                "--seed-text", "人", "--beam-width", "3")[1]
    assert again == out


def test_generate_vocab_mismatch_and_missing_files(quick_model, melody4, tmp_path, capsys):
    vocab = tmp_path / "vocab.txt"
    vocab.write_text("甲\n乙\n", encoding="utf-8")
    code, out, err = run(capsys, "generate", "--checkpoint", quick_model, "--melody", melody4,
                         "--seed-text", "人", "--vocab", vocab)
    assert code == 3 and out == "" and "vocabulary" in err
    assert run(capsys, "generate", "--checkpoint", quick_model, "--melody", tmp_path / "none.mel",
               "--seed-text", "人")[0] == 2
    corrupt = tmp_path / "corrupt.json"
    corrupt.write_text(quick_model.read_text(encoding="utf-8")[:100], encoding="utf-8")
    assert run(capsys, "generate", "--checkpoint", corrupt, "--melody", melody4, "--seed-text", "人")[0] == 3


@pytest.fixture
def train_pairs_file(tmp_path, capsys):
    path = tmp_path / "train.jsonl"
    assert run(capsys, "pairs", bundled_corpus_path(), "--out", path)[0] == 0
    return path


@pytest.mark.slow
def test_evaluate_overfit_model_on_training_split(overfit_run, train_pairs_file, capsys):
    code, out, _ = run(capsys, "evaluate", train_pairs_file, "--checkpoint", overfit_run["checkpoint"],
                       "--beam-width", "1")
    assert code == 0
    report = json.loads(out)
    assert set(report) == {"bleu", "length_control", "melody_matching", "n"}
    assert report["length_control"] == 1.0 and report["n"] == 50


def test_evaluate_report_is_order_invariant(quick_model, train_pairs_file, tmp_path, capsys):
    lines = train_pairs_file.read_text(encoding="utf-8").splitlines()
    random.Random(0).shuffle(lines)
    shuffled = tmp_path / "shuffled.jsonl"
    shuffled.write_text("\n".join(lines) + "\n", encoding="utf-8")
    fig = tmp_path / "metrics.png"
    a = run(capsys, "evaluate", train_pairs_file, "--checkpoint", quick_model, "--beam-width", "2",
            "--figure", fig)
    b = run(capsys, "evaluate", shuffled, "--checkpoint", quick_model, "--beam-width", "2")
    assert a[0] == b[0] == 0
    assert a[1] == b[1]
    assert fig.exists()
    assert len(read_pairs_jsonl(shuffled)) == 50


def test_evaluate_empty_test_set(quick_model, tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("", encoding="utf-8")
    code, out, err = run(capsys, "evaluate", empty, "--checkpoint", quick_model)
    assert code == 2 and out == "" and "empty" in err


def test_structure_command(tmp_path, capsys, melody4):
    code, out, _ = run(capsys, "structure", melody4)
    assert code == 0
    assert out.splitlines() == ["SEBEBEBE", "SME", "SBMME", "S"]
    single = tmp_path / "one.mel"
    single.write_text("N1\n", encoding="utf-8")
    assert run(capsys, "structure", single)[1] == "S\n"


def test_structure_malformed_file_has_no_partial_output(tmp_path, capsys):
    bad = tmp_path / "bad.mel"
    bad.write_text("N1 N1\nN1 N1\nN1 Q1\n", encoding="utf-8")
    code, out, err = run(capsys, "structure", bad)
    assert code == 2 and out == ""
    assert "line 3, column 4" in err
    outfile = tmp_path / "tokens.txt"
    assert run(capsys, "structure", bad, "--out", outfile)[0] == 2
    assert not outfile.exists()


def test_keywords_command(tmp_path, capsys):
    text = tmp_path / "lines.txt"
    text.write_text("月亮\n\n甲 中 乙 中 丙 中 丁\n春风 花 春风 月\n", encoding="utf-8")
    code, out, _ = run(capsys, "keywords", text)
    assert code == 0
    assert out.splitlines() == ["月亮", cli.EMPTY_MARKER, "中", "春风"]
    assert run(capsys, "keywords", text)[1] == out
    lex = tmp_path / "lexicon.txt"
    lex.write_text("春风\n明月\n花好\n", encoding="utf-8")
    plain = tmp_path / "plain.txt"
    plain.write_text("明月春风花好\n", encoding="utf-8")
    assert run(capsys, "keywords", plain, "--lexicon", lex)[1] == "春风\n"


def test_synth_and_pairs_commands(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", tmp_path / "corpus", "--num-pairs", "12", "--synth-seed", "2")
    assert code == 0 and json.loads(out)["documents"] == 3
    code, out, _ = run(capsys, "pairs", tmp_path / "corpus", "--keywords")
    records = [json.loads(line) for line in out.splitlines()]
    assert sum(r["kind"] == "sentence" for r in records) == 12
    assert all(len(r["structure"]) == len(r["target"]) for r in records)


def test_baseline_mode_checkpoint(tmp_path, capsys):
    ckpt = tmp_path / "base.json"
    assert run(capsys, "train", "--checkpoint", ckpt, "--mode", "baseline", *QUICK)[0] == 0
    payload = json.loads(ckpt.read_text(encoding="utf-8"))["payload"]
    assert payload["model_config"]["use_structure"] is False
    assert payload["extra"]["mode"] == "baseline"


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["frobnicate"])
    assert info.value.code == 2
    capsys.readouterr()


def test_overfit_flags_are_cli_flags():
    parser = cli.build_parser()
    args = parser.parse_args(["train", "--checkpoint", "x", *OVERFIT_FLAGS])
    assert (args.hidden, args.layers, args.batch_size) == (32, 1, 4)
