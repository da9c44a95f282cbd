import csv
import json

import numpy as np
import pytest

from advmm import cli
from advmm import evaluation as E
from advmm.data import (Sample, load_embeddings, load_features, write_features)
from advmm.model import load_checkpoint

SMALL = {
    "synth": {"n_train": 64, "n_test": 25, "d_image": 10, "d_word": 5, "max_len": 6, "min_len": 3},
    "model": {"d_hidden": 10, "D": 6, "n_filters": 3, "head_hidden": 6, "widths": [2, 3],
              "dropout": 0.1, "image_norm": "both", "text_norm": "both"},
    "train": {"max_steps": 6, "batch_size": 16, "lr": 0.001, "eval_every": 3},
}


@pytest.fixture
def work(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path / "data"), "--seed", "2"]) == 0
    return tmp_path, cfg


def trained(work, name="run", *extra):
    tmp, cfg = work
    code = cli.main(["train", "--config", str(cfg), "--data", str(tmp / "data"),
                     "--out", str(tmp / name), *extra])
    assert code == 0
    return tmp / name / "checkpoint.bin"


def test_gen_output_loads_and_is_seed_deterministic(work, capsys):
    tmp, cfg = work
    data = tmp / "data"
    assert len(load_features(data / "train.jsonl")) == 128
    assert len(load_features(data / "test.jsonl")) == 50
    assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp / "again"), "--seed", "2"]) == 0
    for f in ("train.jsonl", "train.bin", "test.jsonl", "test.bin"):
        assert (data / f).read_bytes() == (tmp / "again" / f).read_bytes()
    assert "per class" in capsys.readouterr().out


def test_default_gen_round_trips(tmp_path):
    assert cli.main(["gen", "--out", str(tmp_path)]) == 0
    assert len(load_features(tmp_path / "train.jsonl")) == 8000


def test_gen_rejects_zero_categories(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"synth": {"n_categories": 0}}))
    assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "n_categories" in capsys.readouterr().err


@pytest.mark.parametrize("content", ["{not json", json.dumps({"model": {"depth": 3}}),
                                     json.dumps({"extras": {}})])
def test_bad_config_files(tmp_path, content):
    cfg = tmp_path / "c.json"
    cfg.write_text(content)
    assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_train_one_step(work):
    tmp, _ = work
    ckpt = trained(work, "one", "--max-steps", "1")
    assert load_checkpoint(ckpt)[2] == 1
    assert len((tmp / "one" / "log.jsonl").read_text().splitlines()) == 1


def test_flags_override_file_and_echo_reruns(work):
    tmp, cfg = work
    trained(work, "a", "--max-steps", "4", "--seed", "9")
    echo = json.loads((tmp / "a" / "effective_config.json").read_text())
    assert echo["train"]["max_steps"] == 4 and echo["train"]["seed"] == 9
    assert echo["model"]["d_image_in"] == 10
    # the echo alone reproduces the run
    assert cli.main(["train", "--config", str(tmp / "a" / "effective_config.json"),
                     "--data", str(tmp / "data"), "--out", str(tmp / "b")]) == 0
    for f in ("checkpoint.bin", "log.jsonl"):
        assert (tmp / "a" / f).read_bytes() == (tmp / "b" / f).read_bytes()


def test_resume_matches_uninterrupted(work):
    tmp, _ = work
    full = trained(work, "full")
    part = trained(work, "part", "--stop-after", "4")
    trained(work, "part", "--resume", str(part))
    assert full.read_bytes() == part.read_bytes()
    assert (tmp / "full" / "log.jsonl").read_bytes() == (tmp / "part" / "log.jsonl").read_bytes()


def test_category_only_checkpoint_lacks_domain_head(work):
    net = load_checkpoint(trained(work, "c", "--mode", "category_only"))[0]
    assert not any(k.startswith("dom.") for k in net.params)
    assert any(k.startswith("cat.") for k in net.params)


def test_train_missing_data_is_data_error(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path)]) == 3


def test_train_malformed_data_is_data_error(work):
    tmp, cfg = work
    (tmp / "data" / "train.jsonl").write_text('{"format": "nope"}\n')
    assert cli.main(["train", "--config", str(cfg), "--data", str(tmp / "data"),
                     "--out", str(tmp / "x")]) == 3


def test_numerical_abort_exit_code(work, monkeypatch):
    def boom(*a, **k):
        raise cli.NumericalAbort("non-finite loss at step 0")
    monkeypatch.setattr(cli, "train", boom)
    tmp, cfg = work
    assert cli.main(["train", "--config", str(cfg), "--data", str(tmp / "data"),
                     "--out", str(tmp / "x")]) == 4


def test_model_dims_conflicting_with_data(work):
    tmp, _ = work
    cfg = tmp / "bad.json"
    cfg.write_text(json.dumps({**SMALL, "model": {**SMALL["model"], "d_image_in": 99}}))
    assert cli.main(["train", "--config", str(cfg), "--data", str(tmp / "data"),
                     "--out", str(tmp / "x")]) == 3


# eval -----------------------------------------------------------------------

def test_eval_is_deterministic(work):
    tmp, _ = work
    ckpt = trained(work)
    for name in ("e1", "e2"):
        assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(tmp / "data"),
                         "--out", str(tmp / name)]) == 0
    assert (tmp / "e1" / "report.json").read_bytes() == (tmp / "e2" / "report.json").read_bytes()
    rep = json.loads((tmp / "e1" / "report.json").read_text())
    assert {"classification", "domain", "retrieval"} <= set(rep)
    assert set(rep["retrieval"]) == {"img2txt", "txt2img"}
    assert "micro" in (tmp / "e1" / "report.txt").read_text()


def _strip_pairs(src, dst):
    samples = load_features(src)
    write_features(dst, [Sample(s.id, s.domain, s.feature, s.labels, None) for s in samples],
                   C=8, d_image_in=10, L=6, d_word=5)


def test_eval_without_pair_ids_marks_retrieval_unavailable(work):
    tmp, _ = work
    ckpt = trained(work)
    _strip_pairs(tmp / "data" / "test.jsonl", tmp / "nopairs.jsonl")
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(tmp / "nopairs.jsonl"),
                     "--out", str(tmp / "e")]) == 0
    rep = json.loads((tmp / "e" / "report.json").read_text())
    assert rep["retrieval"] == "unavailable"
    assert rep["classification"]["macro"]["f1"] >= 0


def test_eval_recall_matches_exhaustive_oracle(work):
    # the test split holds 25 pairs; regenerate with 50
    tmp, cfg = work
    big = dict(SMALL, synth=dict(SMALL["synth"], n_test=50))
    (tmp / "c50.json").write_text(json.dumps(big))
    assert cli.main(["gen", "--config", str(tmp / "c50.json"), "--out", str(tmp / "d50")]) == 0
    ckpt = trained(work)
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(tmp / "d50"),
                     "--out", str(tmp / "e")]) == 0
    rep = json.loads((tmp / "e" / "report.json").read_text())
    net = load_checkpoint(ckpt)[0]
    test = load_features(tmp / "d50" / "test.jsonl")
    emb = net.embed(test)
    for direction, (src, dst) in E.DIRECTIONS.items():
        q = [i for i, s in enumerate(test) if s.domain == src]
        c = [i for i, s in enumerate(test) if s.domain == dst]
        ranks = []
        for i in q:
            def dist(j):
                a, b = emb[i], emb[j]
                return (1 - a @ b / (np.linalg.norm(a) * np.linalg.norm(b)), test[j].id)
            order = sorted(c, key=dist)
            ranks.append([test[j].pair_id for j in order].index(test[i].pair_id))
        for k in (1, 5, 10):
            assert rep["retrieval"][direction][f"R@{k}"] == np.mean(np.array(ranks) < k)


# search ---------------------------------------------------------------------

def _queries(tmp, picks):
    test = load_features(tmp / "data" / "test.jsonl")
    chosen = [test[i] for i in picks]
    q = [Sample(f"q-{s.id}", s.domain, s.feature, s.labels, None) for s in chosen]
    write_features(tmp / "queries.jsonl", q, C=8, d_image_in=10, L=6, d_word=5)
    return test, chosen


def test_search_identity_and_consistency(work, capsys):
    tmp, _ = work
    ckpt = trained(work)
    test, chosen = _queries(tmp, [0, 30])
    assert cli.main(["search", "--checkpoint", str(ckpt), "--corpus", str(tmp / "data"),
                     "--queries", str(tmp / "queries.jsonl"), "--k", "5",
                     "--out", str(tmp / "s")]) == 0
    res = json.loads((tmp / "s" / "search.json").read_text())
    for r, s in zip(res, chosen):
        assert r["results"][0] == {"id": s.id, "distance": 0.0}
    # same answer as knn_search over exported embeddings
    assert cli.main(["export", "--checkpoint", str(ckpt), "--data", str(tmp / "data"),
                     "--out", str(tmp / "x")]) == 0
    ids, doms, _, _, emb = load_embeddings(tmp / "x" / "embeddings.jsonl")
    idx = E.EmbeddingIndex(ids, doms, emb)
    for r, s in zip(res, chosen):
        want = E.knn_search(idx, emb[ids.index(s.id)], 5)
        assert [(h["id"], h["distance"]) for h in r["results"]] == want


def test_search_full_ranking_restricted(work):
    tmp, _ = work
    ckpt = trained(work)
    _queries(tmp, [3])
    assert cli.main(["search", "--checkpoint", str(ckpt), "--corpus", str(tmp / "data"),
                     "--queries", str(tmp / "queries.jsonl"), "--k", "25", "--to-domain", "image",
                     "--out", str(tmp / "s")]) == 0
    hits = json.loads((tmp / "s" / "search.json").read_text())[0]["results"]
    assert len(hits) == 25 and all("-img-" in h["id"] for h in hits)
    d = [h["distance"] for h in hits]
    assert d == sorted(d)


def test_search_k_too_large(work):
    tmp, _ = work
    ckpt = trained(work)
    _queries(tmp, [3])
    assert cli.main(["search", "--checkpoint", str(ckpt), "--corpus", str(tmp / "data"),
                     "--queries", str(tmp / "queries.jsonl"), "--k", "26", "--to-domain", "text",
                     "--out", str(tmp / "s")]) == 2


# export ---------------------------------------------------------------------

def test_export_csv_rows(work):
    tmp, _ = work
    ckpt = trained(work)
    assert cli.main(["export", "--checkpoint", str(ckpt), "--data", str(tmp / "data"),
                     "--format", "csv", "--out", str(tmp / "x")]) == 0
    rows = list(csv.reader(open(tmp / "x" / "embeddings.csv")))
    assert len(rows) == 50 + 1
    assert rows[0][:3] == ["id", "domain", "e0"] and len(rows[0]) == 2 + 6


def test_export_bin_round_trip(work):
    tmp, _ = work
    ckpt = trained(work)
    assert cli.main(["export", "--checkpoint", str(ckpt), "--data", str(tmp / "data"),
                     "--out", str(tmp / "x")]) == 0
    ids, _, pairs, _, emb = load_embeddings(tmp / "x" / "embeddings.jsonl")
    test = load_features(tmp / "data" / "test.jsonl")
    want = load_checkpoint(ckpt)[0].embed(test)
    assert emb.tobytes() == want.tobytes()
    assert pairs == [s.pair_id for s in test]


def test_export_pca_on_rank_two_embeddings(work):
    tmp, _ = work
    cfg = tmp / "d2.json"
    cfg.write_text(json.dumps({**SMALL, "model": {**SMALL["model"], "D": 2}}))
    assert cli.main(["train", "--config", str(cfg), "--data", str(tmp / "data"),
                     "--out", str(tmp / "r2")]) == 0
    assert cli.main(["export", "--checkpoint", str(tmp / "r2" / "checkpoint.bin"),
                     "--data", str(tmp / "data"), "--pca", "--out", str(tmp / "x")]) == 0
    ev = json.loads((tmp / "x" / "pca_explained_variance.json").read_text())
    assert abs(sum(ev["explained_variance_ratio"]) - 1) <= 1e-10
    assert len(list(csv.reader(open(tmp / "x" / "pca.csv")))) == 51


def test_export_unknown_format(work):
    tmp, _ = work
    ckpt = trained(work)
    assert cli.main(["export", "--checkpoint", str(ckpt), "--data", str(tmp / "data"),
                     "--format", "parquet", "--out", str(tmp / "x")]) == 2


def test_every_command_echoes_config(work):
    tmp, _ = work
    ckpt = trained(work)
    _queries(tmp, [0])
    cmds = {
        "ev": ["eval", "--checkpoint", str(ckpt), "--data", str(tmp / "data")],
        "se": ["search", "--checkpoint", str(ckpt), "--corpus", str(tmp / "data"),
               "--queries", str(tmp / "queries.jsonl"), "--k", "1"],
        "ex": ["export", "--checkpoint", str(ckpt), "--data", str(tmp / "data")],
    }
    for name, argv in cmds.items():
        assert cli.main(argv + ["--out", str(tmp / name), "--seed", "4"]) == 0
        echo = json.loads((tmp / name / "effective_config.json").read_text())
        assert echo["seed"] == 4 and echo["command"] == argv[0]


def test_usage_error_is_config_error(capsys):
    assert cli.main(["train"]) == 2
    assert cli.main(["frobnicate"]) == 2
