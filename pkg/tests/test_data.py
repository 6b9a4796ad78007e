import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from groundhog.data.conversations import (
    ConversationError,
    GroundedConversation,
    Turn,
    from_json,
    grd_runs,
    make_conversation,
    to_json,
    validate,
)
from groundhog.data.corpus import (CorpusConfig, CorpusError, gen_corpus, read_corpus,
                                   task_counts, write_corpus)
from groundhog.data.sampler import SamplerSpec, balance_sample
from groundhog.data.scenes import (COLORS, PerturbSpec, Scene, SceneConfig, SceneError,
                                   encode_backbones, gen_proposals, gen_scene)
from groundhog.masks import BinaryMask, ProposalSet, best_match, iou_mask
from groundhog.metrics import any_iou


# -- scenes ---------------------------------------------------------------------------------

def test_gen_scene_deterministic():
    a = gen_scene(5, SceneConfig(n_entities=4))
    b = gen_scene(5, SceneConfig(n_entities=4))
    assert json.dumps(a.to_json()) == json.dumps(b.to_json())


@given(st.integers(0, 10**6), st.integers(0, 6))
def test_scene_invariants(seed, n):
    s = gen_scene(seed, SceneConfig(n_entities=n))
    assert len(s.entities) == n
    acc = np.zeros((s.height, s.width), int)
    for e in s.entities:
        assert e.mask.area() > 0
        acc += e.mask.bits
        rows = np.flatnonzero(e.mask.bits.any(axis=1))
        # the entity lies inside its region band
        assert (rows < 16).all() if e.region == "sky" else (rows >= 16).all()
    assert acc.max() <= 1
    assert len({e.attrs for e in s.entities}) == n


def test_two_entities_disjoint():
    s = gen_scene(1, SceneConfig(n_entities=2))
    assert len(s.entities) == 2
    assert not (s.entities[0].mask.bits & s.entities[1].mask.bits).any()


def test_parts_strictly_inside_parent():
    found = 0
    for seed in range(30):
        s = gen_scene(seed, SceneConfig(n_entities=5, allow_parts=True))
        for e in s.entities:
            for part in e.parts.values():
                found += 1
                assert not (part.bits & ~e.mask.bits).any()
                assert 0 < part.area() < e.mask.area()
    assert found > 0


def test_scene_errors_and_json_round_trip():
    with pytest.raises(SceneError):
        gen_scene(0, SceneConfig(n_entities=7))
    s = gen_scene(3, SceneConfig(n_entities=3, allow_parts=True))
    back = Scene.from_json(s.to_json())
    assert back.to_json() == s.to_json()


def test_proposals_without_perturbation_are_exact():
    s = gen_scene(2, SceneConfig(n_entities=4))
    props = gen_proposals(s, PerturbSpec(n_distractors=0), 0)
    assert len(props) == 4 and set(props.provenance) == {"oracle"}
    assert any_iou([e.mask for e in s.entities], props) == 1.0


def test_proposals_with_distractors():
    for seed in range(20):
        s = gen_scene(seed, SceneConfig(n_entities=3))
        props = gen_proposals(s, PerturbSpec(shift_px=2, dilate=1, split=True, n_distractors=4), seed)
        assert props.provenance.count("oracle") == 3
        for e in s.entities:
            k = best_match(e.mask, props)
            assert props.provenance[k] == "oracle"
            assert iou_mask(props.binary(k), e.mask) == 1.0
        again = gen_proposals(s, PerturbSpec(shift_px=2, dilate=1, split=True, n_distractors=4), seed)
        assert np.array_equal(again.masks, props.masks)


def test_split_distractors_are_proper_subsets():
    s = gen_scene(4, SceneConfig(n_entities=1))
    parent = s.entities[0].mask.bits
    props = gen_proposals(s, PerturbSpec(shift_px=0, dilate=0, split=True, n_distractors=3), 0)
    subs = [props.binary(i).bits for i, t in enumerate(props.provenance) if t == "distractor"]
    assert subs
    for b in subs:
        assert not (b & ~parent).any() and b.sum() < parent.sum()


def test_no_subset_distractors_when_split_and_erode_off():
    for seed in range(20):
        s = gen_scene(seed, SceneConfig(n_entities=3))
        props = gen_proposals(s, PerturbSpec(shift_px=4, dilate=2, split=False, erode=False,
                                             n_distractors=3), seed)
        for i, t in enumerate(props.provenance):
            if t != "distractor":
                continue
            d = props.binary(i).bits
            assert all((d & ~e.mask.bits).any() for e in s.entities)


def test_backbones_empty_scene():
    a, b = encode_backbones(Scene(()))
    assert a.data.shape == (9, 8, 8) and b.data.shape == (4, 8, 8)
    assert (a.data[0] == 1).all() and not a.data[1:].any()
    assert not b.data[0].any()


def _square_scene(y0, x0, size, color="red"):
    bits = np.zeros((32, 32), bool)
    bits[y0 : y0 + size, x0 : x0 + size] = True
    from groundhog.data.scenes import Entity
    return Scene((Entity(BinaryMask(bits), color, "square", "sky"),))


def test_backbones_single_block_square():
    a, b = encode_backbones(_square_scene(4, 8, 4))
    onehot = np.zeros(9)
    onehot[COLORS.index("red") + 1] = 1
    assert np.array_equal(a.data[:, 1, 2], onehot)
    assert b.data[0, 1, 2] == 1.0


def test_backbones_edge_counts_two_block_square():
    # an 8x8 square covering blocks (0..1, 0..1): each block holds 4 top-or-bottom
    # and 4 left-or-right boundary pixels
    _, b = encode_backbones(_square_scene(0, 0, 8))
    assert np.array_equal(b.data[1, :2, :2], np.full((2, 2), 4.0))
    assert np.array_equal(b.data[2, :2, :2], np.full((2, 2), 4.0))
    assert b.data[1].sum() == 16 and b.data[2].sum() == 16
    assert (b.data[3, 4:] == 1).all() and not b.data[3, :4].any()


# -- conversations ---------------------------------------------------------------------------

def _scene(seed=0, n=3, twin=0.0):
    return gen_scene(seed, SceneConfig(n_entities=n, twin_prob=twin))


def _props(scene):
    return gen_proposals(scene, PerturbSpec(n_distractors=0), 0)


def test_res_response_schema():
    from groundhog.data.scenes import Entity
    bits = np.zeros((32, 32), bool)
    bits[2:8, 2:8] = True
    scene = Scene((Entity(BinaryMask(bits), "red", "square", "sky"),))
    conv = make_conversation(scene, _props(scene), "RES", 0)
    reply = conv.turns[1]
    assert reply.text == "Here it is: <GRD> the red square </GRD>"
    (span,) = reply.spans
    assert span.supervision.kind == "mask"
    assert np.array_equal(span.supervision.masks[0].bits, bits)


def test_res_negative_and_multi():
    scene = _scene(1, 4, twin=1.0)
    neg = make_conversation(scene, _props(scene), "RES", 1, res_kind="negative")
    assert neg.turns[1].text.startswith("Sorry, I cannot find <GRD>")
    assert neg.turns[1].spans[0].supervision.masks[0].area() == 0
    multi = make_conversation(scene, _props(scene), "RES", 1, res_kind="multi")
    assert "both" in multi.turns[1].text
    assert len(multi.turns[1].spans[0].supervision.masks) == 2


def test_gvqa_absent_answers_no():
    scene = _scene(2, 3)
    for seed in range(40):
        conv = make_conversation(scene, _props(scene), "GVQA", seed, presence_positive=False)
        assert conv.meta["answer"] == "no"
        assert conv.turns[1].text == "No." and conv.turns[1].spans == ()


def test_rd_reply_names_pointed_entity():
    scene = _scene(3, 4)
    for seed in range(10):
        conv = make_conversation(scene, _props(scene), "RD", seed)
        e = scene.entities[conv.meta["targets"][0]]
        assert "<PTR>" in conv.turns[0].text and len(conv.turns[0].pointers) == 1
        for word in (e.color, e.shape, "sky" if e.region == "sky" else "ground"):
            assert word in conv.turns[1].text


def test_box_only_supervision():
    scene = _scene(4, 3)
    conv = make_conversation(scene, _props(scene), "RES", 0, box_only=True)
    sup = conv.turns[1].spans[0].supervision
    assert sup.kind == "box" and sup.masks == ()


def test_incompatible_task_raises():
    scene = _scene(5, 3, twin=0.0)
    with pytest.raises(ConversationError):
        make_conversation(scene, _props(scene), "RES", 0, res_kind="multi")
    with pytest.raises(ConversationError):
        make_conversation(scene, _props(scene), "FOO", 0)


def test_grd_runs_and_validation():
    assert grd_runs("a <GRD> b </GRD> c <GRD> d </GRD>") == [(2, 16), (19, 33)]
    for bad in ("<GRD> <GRD> </GRD>", "</GRD>", "<GRD> x"):
        with pytest.raises(ConversationError):
            grd_runs(bad)
    scene = _scene(6, 2)
    conv = make_conversation(scene, _props(scene), "RES", 0)
    broken = GroundedConversation((Turn("user", "<GRD> x </GRD>"),) + conv.turns[1:], conv.task,
                                  conv.source, conv.scene, conv.proposals)
    with pytest.raises(ConversationError):
        validate(broken)
    ptr = GroundedConversation((Turn("user", "look <PTR>"),) + conv.turns[1:], conv.task,
                               conv.source, conv.scene, conv.proposals)
    with pytest.raises(ConversationError):
        validate(ptr)


def test_conversation_json_round_trip():
    cfg = CorpusConfig(tasks={"GCAP": 1, "RES": 1, "GVQA": 1, "RD": 1}, allow_parts=True)
    for conv in gen_corpus(cfg, 30, 7):
        obj = to_json(conv)
        assert to_json(from_json(json.loads(json.dumps(obj)))) == obj


# -- corpus ----------------------------------------------------------------------------------

def test_corpus_properties(tmp_path):
    cfg = CorpusConfig()
    convs = gen_corpus(cfg, 60, 3)
    assert task_counts(convs) == {"GCAP": 0, "RES": 60, "GVQA": 0, "RD": 0}
    for conv in convs:
        validate(conv)
        # every ground-truth mask is reachable with IoU 1
        for span in conv.assistant_spans():
            for m in span.supervision.masks:
                if m.area():
                    assert iou_mask(conv.proposals.binary(best_match(m, conv.proposals)), m) == 1.0
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_corpus(p1, convs)
    write_corpus(p2, gen_corpus(cfg, 60, 3))
    assert p1.read_bytes() == p2.read_bytes()
    assert len(p1.read_text().splitlines()) == 60
    back = read_corpus(p1)
    assert [to_json(c) for c in back] == [to_json(c) for c in convs]


def test_corpus_mix_and_config_errors():
    cfg = CorpusConfig(tasks={"GCAP": 1, "RES": 1, "GVQA": 1, "RD": 1})
    counts = task_counts(gen_corpus(cfg, 80, 0))
    assert sum(counts.values()) == 80 and min(counts.values()) > 5
    with pytest.raises(CorpusError):
        CorpusConfig(tasks={"XYZ": 1})
    with pytest.raises(CorpusError):
        CorpusConfig.from_dict({"bogus": 1})
    assert CorpusConfig.from_dict(CorpusConfig().to_dict()) == CorpusConfig()


def test_read_corpus_reports_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    good = json.dumps(to_json(gen_corpus(CorpusConfig(), 1, 0)[0]))
    p.write_text(good + "\n{not json}\n")
    with pytest.raises(CorpusError) as info:
        read_corpus(p)
    assert info.value.line == 2


# -- sampler ---------------------------------------------------------------------------------

def test_balance_examples():
    stream, warn = balance_sample({"a": list(range(5))}, SamplerSpec({"a": 2}, 0))
    assert len(stream) == 10 and sorted(stream) == sorted(list(range(5)) * 2) and not warn
    stream, _ = balance_sample({"a": list(range(10))}, SamplerSpec({"a": 0.5}, 0))
    assert len(stream) == 5 and len(set(stream)) == 5
    spec = SamplerSpec({"a": Fraction(3, 2), "b": 1}, 9)
    corp = {"a": list("abcd"), "b": list("xyz")}
    assert balance_sample(corp, spec) == balance_sample(corp, spec)


def test_balance_empty_source_warns_and_bad_ratio_raises():
    stream, warn = balance_sample({"a": [], "b": [1]}, SamplerSpec({"a": 1}, 0))
    assert stream == [1] and warn[0]["source"] == "a"
    with pytest.raises(ValueError):
        balance_sample({"a": [1]}, SamplerSpec({"a": 0}, 0))


@given(st.dictionaries(st.sampled_from("abcd"),
                       st.tuples(st.integers(1, 12), st.fractions(Fraction(1, 4), 3)),
                       min_size=1),
       st.integers(0, 100))
def test_balance_counts_exact(spec, seed):
    corpora = {k: [(k, i) for i in range(n)] for k, (n, _) in spec.items()}
    ratios = {k: r for k, (_, r) in spec.items()}
    stream, _ = balance_sample(corpora, SamplerSpec(ratios, seed))
    for k, (n, r) in spec.items():
        want = int(r * n + Fraction(1, 2))
        got = [x for x in stream if x[0] == k]
        assert len(got) == want
        if r <= 1:
            assert len(set(got)) == want
