import pytest

from stgkd.evaluation import MetricReport, VocabMismatchError, evaluate_model
from stgkd.trainer import train

from helpers import tiny_config, tiny_dataset


@pytest.fixture(scope="module")
def data():
    return tiny_dataset(12)


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, data):
    out = tmp_path_factory.mktemp("ck")
    train(tiny_config(epochs=1, variant="full"), data, out_dir=out)
    return out / "best"


def test_one_video_perfect_candidate_scores_one(tmp_path, data, checkpoint, monkeypatch):
    sample = data["test"][0]
    ref = sample.refs[0]

    def fake_decode(model, batch, vocab, branch, max_len):
        return [ref] * len(batch)

    monkeypatch.setattr("stgkd.evaluation.decode_batch", fake_decode)
    monkeypatch.setattr("stgkd.evaluation.teacher_forced_accuracy", lambda *a, **k: 1.0)
    report = evaluate_model(checkpoint, [sample], out_path=tmp_path / "r.json")
    assert (report.bleu4, report.rouge_l, report.token_accuracy) == (1.0, 1.0, 1.0)
    assert report.per_video[0]["candidate"] == ref and report.corpus_size == 1


def test_report_json_round_trip(tmp_path, data, checkpoint):
    path = tmp_path / "report.json"
    report = evaluate_model(checkpoint, data["test"], out_path=path)
    back = MetricReport.read(path)
    assert back == report
    d = report.to_json()
    assert set(d) == {"metric", "per_video", "checkpoint", "branch"}
    assert set(d["metric"]) == {"bleu4", "rouge_l", "token_accuracy"}
    assert set(d["per_video"][0]) == {"id", "candidate", "refs", "bleu4"}
    for v in d["metric"].values():
        assert 0.0 <= v <= 1.0


def test_scene_is_default_and_object_branch_available_on_full(data, checkpoint):
    assert evaluate_model(checkpoint, data["test"]).branch == "scene"
    assert evaluate_model(checkpoint, data["test"], branch="object").branch == "object"


def test_object_branch_on_scene_only_checkpoint_errors(tmp_path, data):
    train(tiny_config(epochs=1, variant="scene_only"), data, out_dir=tmp_path)
    with pytest.raises(ValueError, match="no 'object' branch"):
        evaluate_model(tmp_path / "best", data["test"], branch="object")


def test_vocab_mismatch_errors(data, checkpoint):
    sample = data["test"][0]
    alien = type(sample)(**{**sample.__dict__, "refs": ["a zebra juggles a piano"]})
    with pytest.raises(VocabMismatchError):
        evaluate_model(checkpoint, [alien])


def test_empty_dataset_errors(checkpoint):
    with pytest.raises(ValueError):
        evaluate_model(checkpoint, [])
