"""Smoke test for the kgirnet Python extension.

Build and install first, e.g. `maturin develop -m crates/python/Cargo.toml`
from the repository root, then run `python python/smoke_test.py`.
"""

import json
import math
import pathlib
import tempfile

import kgirnet

ROOT = pathlib.Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "crates" / "core" / "tests" / "fixtures"


def fixture(name):
    return str(FIXTURES / name)


def check_kg():
    kg = kgirnet.KnowledgeGraph([("a", "r1", "b"), ("b", "r2", "c")])
    assert len(kg) == 2 and kg.num_entities == 3 and kg.num_relations == 2
    assert kg.add("c", "r1", "d")
    assert not kg.add("c", "r1", "d")
    assert kg.lookup("a", "r1") == ["b"]
    assert set(kg.subgraph_relations("a", k=1)) == {"r1"}
    with tempfile.TemporaryDirectory() as tmp:
        path = str(pathlib.Path(tmp) / "kg.tsv")
        kg.save(path)
        again = kgirnet.KnowledgeGraph.load(path)
        assert sorted(again.triples()) == sorted(kg.triples())
    try:
        kg.lookup("nobody", "r1")
    except KeyError:
        pass
    else:
        raise AssertionError("unknown entity should raise KeyError")


def check_lexical():
    kg = kgirnet.KnowledgeGraph.load(fixture("incar_kg.tsv"))
    tokens = kgirnet.tokenize("Your dinner is on monday at 7pm.")
    delex = kgirnet.delexicalize(tokens, "dinner", kg)
    assert "r:date" in delex and "r:time" in delex, delex
    relex, unresolved = kgirnet.relexicalize(delex, "dinner", kg)
    assert relex == tokens and unresolved == []


def check_graph():
    kg = kgirnet.KnowledgeGraph.load(fixture("movies_kg.tsv"))
    n = len(kg.subgraph_index("avatar", k=2))
    out = kgirnet.graph_encode(kg, "avatar", [1.0] * n, k=2)
    assert all(math.isclose(x, 1.0) for x in out)

    emb = kgirnet.Embeddings.load(fixture("embeddings.txt"))
    ranked = kgirnet.relation_link(kg, emb, "avatar", "who is the director of avatar and how was it rated")
    top2 = {label for label, _ in ranked[:2]}
    assert top2 == {"directed_by", "rating"}, ranked
    scores = [s for _, s in ranked]
    assert scores == sorted(scores, reverse=True)


def check_metrics():
    c = ["the meeting is at 3pm", "it is sunny"]
    assert math.isclose(kgirnet.bleu(c, c), 100.0)
    assert kgirnet.meteor(c, c) > 90.0
    assert math.isclose(kgirnet.entity_f1({"3pm"}, {"3pm", "monday"}), 2 / 3)
    try:
        kgirnet.bleu(c, c[:1])
    except ValueError:
        pass
    else:
        raise AssertionError("length mismatch should raise ValueError")


def check_train_and_generate():
    with tempfile.TemporaryDirectory() as tmp:
        job = {
            "kg": fixture("incar_kg.tsv"),
            "embeddings": fixture("embeddings.txt"),
            "train": fixture("incar_train.jsonl"),
            "domain": "in-car",
            "output": "ckpt",
            "preset": "kgirnet_nb",
            "config": {"h_dim": 16, "emb_dim": 8, "epochs": 1, "max_len": 10, "skip_validation": True},
        }
        summary = kgirnet.train(json.dumps(job), workdir=tmp)
        assert summary["epochs"] == 1 and summary["steps"] > 0, summary
        model = kgirnet.Model.load(str(pathlib.Path(tmp) / "ckpt"))
        assert model.vocab_size > 5 and "dinner" in model.entities
        first = model.generate("when is my dinner ?")
        assert first == model.generate("when is my dinner ?")
        second = model.generate("who is coming ?", history=["when is my dinner ?", first["response"]], beam_width=2)
        for reply in (first, second):
            for key in ("response", "intermediate", "entity", "relations", "objects", "subgraph_relations"):
                assert key in reply, key
            assert set(reply["relations"]) <= set(reply["subgraph_relations"])


def main():
    for check in (check_kg, check_lexical, check_graph, check_metrics, check_train_and_generate):
        check()
        print(f"ok {check.__name__}")


if __name__ == "__main__":
    main()
