import numpy as np
import pytest
from dataclasses import replace

from gradcheck import check_model
from groundhog.data.conversations import (COUNT_TEMPLATES, GCAP_TEMPLATES, PRESENCE_TEMPLATES,
                                          RD_TEMPLATES, RES_TEMPLATES)
from groundhog.data.corpus import CorpusConfig, gen_corpus
from groundhog.data.scenes import PerturbSpec
from groundhog.masks import BinaryMask, Box, iou_mask
from groundhog.model.checkpoint import (CheckpointError, decode_ght1, encode_ght1,
                                        load_checkpoint, save_checkpoint)
from groundhog.model.decode import decode, decode_many, hidden_states
from groundhog.model.layout import (LayoutError, bind_pointers, permute_entities, prepare,
                                    prompt_example, replace_ptr)
from groundhog.model.objective import loss_and_grads
from groundhog.model.optim import AdamState, cosine_lr, decays
from groundhog.model.params import TrainConfig, init_params, param_shapes
from groundhog.model.train import (NumericError, epoch_order, epoch_view, steps_per_epoch,
                                   train, train_step)
from groundhog.model.transformer import SequenceTooLong, as_f64, forward, logits, make_batch
from groundhog.model.vocab import GRD, SPECIALS, Vocabulary, VocabError

V = Vocabulary()
CFG = TrainConfig()
MIXED = CorpusConfig(tasks={"GCAP": 1, "RES": 1, "GVQA": 1, "RD": 1})


@pytest.fixture(scope="module")
def convs():
    return gen_corpus(MIXED, 24, 11)


@pytest.fixture(scope="module")
def examples(convs):
    return [prepare(c, V, CFG.max_seq) for c in convs]


@pytest.fixture(scope="module")
def params():
    return init_params(CFG, len(V))


# -- vocabulary -----------------------------------------------------------------------------

def test_vocab_round_trip_on_templates(convs):
    texts = [t.replace("{}", "the red disc") for group in (
        GCAP_TEMPLATES, RES_TEMPLATES, PRESENCE_TEMPLATES, COUNT_TEMPLATES, RD_TEMPLATES)
        for t in group]
    texts += [t.text for c in convs for t in c.turns]
    for s in texts:
        assert V.detokenize(V.tokenize(s)) == s


def test_vocab_specials_and_errors():
    assert V.tokenize(GRD) == [V.grd] and V.grd == SPECIALS.index(GRD)
    assert len(V) <= 512
    with pytest.raises(VocabError):
        V.tokenize("the zebra")
    with pytest.raises(VocabError):
        Vocabulary(["a"] + list(SPECIALS))


# -- layout ---------------------------------------------------------------------------------

def test_prepare_layout(convs, examples):
    for conv, ex in zip(convs, examples):
        assert ex.n_entities == len(conv.proposals)
        words = [V.tokens[i] for i in ex.ids]
        assert words[0] == "<s>" and words[-1] == "</s>"
        a = words.index("ASSISTANT:")
        # only the assistant reply (and its </s>) is a language-model target
        assert not ex.targets[: a + 1].any() and ex.targets[a + 1 :].all()
        for ph in ex.phrases:
            assert ex.ids[ph.start] == V.grd and ex.ids[ph.end] == V.grd_end


def test_prompt_only_stops_before_reply(convs):
    ex = prepare(convs[0], V, CFG.max_seq, prompt_only=True)
    assert V.tokens[ex.ids[-1]] == "ASSISTANT:" and not ex.phrases


def test_prepare_too_long(convs):
    with pytest.raises(LayoutError):
        prepare(convs[0], V, 10)


def test_pointer_binding(convs):
    conv = next(c for c in convs if c.task == "RD")
    props = conv.proposals
    ids = V.tokenize("<s> USER: Describe it <PTR>. ASSISTANT:")
    slot = ids.index(V.ptr)
    assert bind_pointers(ids, [props.binary(3 % len(props))], props, V) == [(slot, 3 % len(props))]
    emb = np.arange(len(ids) * 2, dtype=float).reshape(-1, 2)
    ents = np.full((len(props), 2), -1.0)
    ents[3 % len(props)] = [7.0, 8.0]
    out = replace_ptr(emb, ids, [props.binary(3 % len(props))], props, ents, V)
    assert np.array_equal(out[slot], [7.0, 8.0])
    plain = V.tokenize("<s> USER: Segment: the red disc. ASSISTANT:")
    assert np.array_equal(replace_ptr(emb[: len(plain)], plain, [], props, ents, V), emb[: len(plain)])
    with pytest.raises(LayoutError):
        bind_pointers(ids, [], props, V)


def test_box_pointer_matches_brute_force(convs):
    for conv in convs:
        for (pos, q), p in zip(prepare(conv, V, CFG.max_seq).ptr, conv.pointers()):
            target = p if isinstance(p, BinaryMask) else None
            if target is None:
                bits = np.zeros(conv.proposals.shape, bool)
                bits[p.y0 : p.y1, p.x0 : p.x1] = True
                target = BinaryMask(bits)
            ious = [iou_mask(conv.proposals.binary(i), target) for i in range(len(conv.proposals))]
            assert q == int(np.argmax(ious))


def test_permute_entities_remaps_pointers(convs):
    conv = next(c for c in convs if c.task == "RD")
    ex = prepare(conv, V, CFG.max_seq)
    perm = np.random.default_rng(0).permutation(ex.n_entities)
    moved = permute_entities(ex, perm)
    (pos, q), = ex.ptr
    (pos2, q2), = moved.ptr
    assert pos2 == pos and perm[q2] == q
    assert np.array_equal(moved.masks, ex.masks[perm])


# -- transformer ----------------------------------------------------------------------------

def test_logits_shape(params, examples):
    batch = make_batch(examples[:3], V.pad, CFG.max_seq)
    hf, _ = forward(as_f64(params), batch, CFG)
    assert logits(params, hf).shape == batch.shape + (len(V),)


def test_causality_bit_identical(params, examples):
    ex = examples[0]
    h = hidden_states(params, CFG, ex)
    t = len(ex.ids) - 3
    ids = ex.ids.copy()
    ids[t] = V.id("red") if ids[t] != V.id("red") else V.id("blue")
    h2 = hidden_states(params, CFG, replace(ex, ids=ids))
    cut = ex.n_entities + t
    assert np.array_equal(h[:cut], h2[:cut])
    assert not np.array_equal(h[cut:], h2[cut:])


def test_entity_order_invariance_without_positions(examples):
    # With one layer, text positions attend to the entity inputs as a set; deeper
    # stacks see causally mixed entity states and lose the invariance.
    cfg = TrainConfig(layers=1)
    p = init_params(cfg, len(V), seed=4)
    p["pos_emb"] = np.zeros_like(p["pos_emb"])
    ex = examples[0]
    perm = np.arange(ex.n_entities)[::-1]
    h = hidden_states(p, cfg, ex)
    h2 = hidden_states(p, cfg, permute_entities(ex, perm))
    n = ex.n_entities
    assert np.allclose(h[n:], h2[n:], atol=1e-9)
    assert not np.allclose(h[:n], h2[:n][perm], atol=1e-6)


def test_batch_rows_independent(params, examples):
    alone = hidden_states(params, CFG, examples[1])
    hf, _ = forward(as_f64(params), make_batch(examples[:4], V.pad, CFG.max_seq), CFG)
    assert np.allclose(hf[1, : examples[1].length], alone, atol=1e-12)


def test_sequence_too_long(examples):
    with pytest.raises(SequenceTooLong):
        make_batch(examples[:1], V.pad, 5)


# -- objective and gradients ------------------------------------------------------------------

def test_full_model_gradients():
    assert max(check_model(seed) for seed in range(10)) < 1e-3


def test_lm_only_targets_and_decoupling(params, examples):
    zero = CFG.replace(loss_weights={"lm": 1.0, "dice": 0.0, "bce": 0.0, "proj": 0.0})
    bundle, g, _ = loss_and_grads(params, examples[:6], zero)
    stripped = [replace(ex, phrases=[]) for ex in examples[:6]]
    bundle2, g2, _ = loss_and_grads(params, stripped, CFG)
    assert bundle.lm == bundle2.lm
    for k in g:
        assert np.allclose(g[k], g2[k], rtol=0, atol=1e-12), k


def test_initial_lm_loss_near_uniform(params, examples):
    bundle, _, _ = loss_and_grads(params, examples, CFG, need_grads=False)
    assert abs(bundle.lm - np.log(len(V))) < 1.0


# -- optimizer and training -------------------------------------------------------------------

def test_cosine_schedule():
    assert cosine_lr(2e-4, 0, 100) == 2e-4
    assert cosine_lr(2e-4, 50, 100) == pytest.approx(1e-4)
    assert cosine_lr(2e-4, 100, 100) == pytest.approx(0.0, abs=1e-20)


def test_decay_groups(params):
    for name, shape in param_shapes(CFG, len(V)):
        assert decays(name, params[name]) == (len(shape) >= 2)


def test_repeated_batch_loss_decreases(examples):
    p = init_params(CFG, len(V))
    st = AdamState.zeros_like(p)
    losses = [train_step(p, st, examples[:16], CFG, 10**9)[0].total for _ in range(50)]
    ups = sum(b >= a for a, b in zip(losses, losses[1:]))
    assert ups <= 3 and losses[-1] < 0.5 * losses[0]


def test_training_deterministic(examples):
    cfg = CFG.replace(epochs=2, batch=8)
    a = train(examples, cfg, len(V))
    b = train(examples, cfg, len(V))
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])
    assert a.records == b.records and len(a.records) == 2
    assert [r["epoch"] for r in a.records] == [0, 1]


def test_resume_replays_remaining_batches(examples):
    cfg = CFG.replace(epochs=2, batch=8)
    full = train(examples, cfg, len(V))
    spe = steps_per_epoch(len(examples), cfg.batch)
    # run the first epoch by hand under the two-epoch schedule, then resume
    p = init_params(cfg, len(V))
    st = AdamState.zeros_like(p)
    order = epoch_order(cfg.seed, 0, len(examples))
    for k in range(spe):
        idx = order[k * cfg.batch : (k + 1) * cfg.batch]
        train_step(p, st, [epoch_view(examples[i], cfg.seed, 0, int(i)) for i in idx],
                   cfg, 2 * spe)
    rest = train(examples, cfg, len(V), params=p, state=st)
    assert rest.state.step == full.state.step == 2 * spe
    for k in full.params:
        assert np.array_equal(rest.params[k], full.params[k])


def test_non_finite_loss_raises(examples):
    p = init_params(CFG, len(V))
    p["lm_head.b"] = p["lm_head.b"].copy()
    p["lm_head.b"][0] = np.nan
    with pytest.raises(NumericError):
        train_step(p, AdamState.zeros_like(p), examples[:2], CFG, 10)


# -- checkpoint -----------------------------------------------------------------------------

def test_ght1_round_trip():
    t = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5], np.float32)}
    buf = encode_ght1(t)
    assert buf[:4] == b"GHT1"
    back = decode_ght1(buf)
    assert list(back) == ["a", "b"] and all(np.array_equal(back[k], t[k]) for k in t)
    with pytest.raises(CheckpointError):
        decode_ght1(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointError):
        decode_ght1(buf[:-2])


def test_checkpoint_forward_bit_identical(tmp_path, examples):
    cfg = CFG.replace(epochs=1, batch=8)
    res = train(examples, cfg, len(V))
    save_checkpoint(tmp_path / "ck", res.params, res.state, cfg, V)
    p, st, cfg2, vocab = load_checkpoint(tmp_path / "ck")
    assert cfg2 == cfg and vocab == V and st.step == res.state.step
    for ex in examples[:3]:
        assert np.array_equal(hidden_states(p, cfg2, ex), hidden_states(res.params, cfg, ex))
    save_checkpoint(tmp_path / "ck2", p, st, cfg2, vocab)
    for name in ("params.ght1", "optim.ght1", "manifest.json"):
        assert (tmp_path / "ck" / name).read_bytes() == (tmp_path / "ck2" / name).read_bytes()
    (tmp_path / "ck2" / "params.ght1").write_bytes(b"GHT1")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck2")


# -- decoding -------------------------------------------------------------------------------

def test_forced_decode_grounds_phrase(params, convs):
    conv = next(c for c in convs if c.task == "RES")
    prompt = prepare(conv, V, CFG.max_seq, prompt_only=True)
    forced = V.tokenize("Here it is: <GRD> the red disc </GRD> </s>")
    r = decode(params, CFG, V, prompt, conv.proposals, forced=forced)
    assert r.ids == forced and r.stopped and not r.warnings
    assert r.text == "Here it is: <GRD> the red disc </GRD>"
    (ph,) = r.phrases
    assert ph.text == "the red disc" and len(ph.grounded.scores) == len(conv.proposals)
    # replaying the same tokens teacher-forced gives the same scores
    full = replace(prompt, ids=np.concatenate([prompt.ids, forced]))
    h = hidden_states(params, CFG, full)
    from groundhog.grounding import grounding_query, score_entities
    from groundhog.model.params import sub
    base = prompt.length
    q = grounding_query(h[base + ph.start], h[base + ph.end])
    assert np.allclose(score_entities(q, h[: prompt.n_entities], sub(params, "head.")),
                       ph.grounded.scores, atol=1e-12)


def test_decode_warnings(params, convs):
    conv = convs[0]
    prompt = prepare(conv, V, CFG.max_seq, prompt_only=True)
    r = decode(params, CFG, V, prompt, conv.proposals, max_new=3,
               forced=V.tokenize("</GRD> <GRD> red"))
    kinds = {w["warning"] for w in r.warnings}
    assert "unmatched </GRD>" in kinds and "unclosed <GRD> discarded" in kinds
    assert not r.stopped and r.phrases == []


def test_decode_deterministic_and_batch_independent(params, convs):
    prompts = [prepare(c, V, CFG.max_seq, prompt_only=True) for c in convs[:4]]
    props = [c.proposals for c in convs[:4]]
    many = decode_many(params, CFG, V, prompts, props, max_new=8)
    for k in range(4):
        one = decode(params, CFG, V, prompts[k], props[k], max_new=8)
        assert one.ids == many[k].ids
        assert V.pad not in one.ids and V.bos not in one.ids and V.ptr not in one.ids


def test_prompt_example_matches_prepare(convs):
    conv = next(c for c in convs if c.task == "RD")
    a = prepare(conv, V, CFG.max_seq, prompt_only=True)
    b = prompt_example(conv.scene, conv.proposals, conv.turns[0].text, V, CFG.max_seq,
                       pointers=conv.turns[0].pointers)
    assert np.array_equal(a.ids, b.ids) and a.ptr == b.ptr
