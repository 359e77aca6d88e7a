import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_state
from nsif import agents as A
from nsif import neuralkit as nk
from nsif.instructgen import Vocab, build_vocab, episode_instruction_sets
from nsif.selftest import TOY_DIMS, check_decoder_parity, check_selector_properties
from nsif.worldsim.detect import detect
from nsif.worldsim.sim import observe, replay
from nsif.worldsim.types import (
    ActionKind,
    Detection,
    HighLevelAction,
    ObjClass,
    SubtaskFrame,
)

APPLE, KNIFE = SubtaskFrame(HighLevelAction.PickupObject, "Apple"), SubtaskFrame(HighLevelAction.PickupObject, "Knife")


def det(cls, i, features=None):
    return Detection(frozenset({(i, 0)}), cls, tuple(features if features is not None else [float(i)] * 16), i)


def orthonormal():
    return np.eye(A.N_CLASSES)


# ------------------------------------------------------------------ encoders


def test_language_encoding_row_count():
    cfg = A.AgentConfig(**TOY_DIMS)
    vocab = Vocab(["slice", "bread", "cut", "the", "loaf", "knife"])
    params = A.init_params(cfg, len(vocab))
    H = A.encode_language(params, cfg, ["slice", "bread"], [["cut", "the", "loaf"]], vocab)
    assert H.shape == (6, cfg.mem_dim)
    H2 = A.encode_language(params, cfg, ["slice", "bread"], [["slice", "the", "knife"]], vocab)
    assert H2.shape == H.shape and not np.allclose(H, H2)
    with pytest.raises(A.EmptyInstruction):
        A.instruction_ids([], [[]], vocab)


def test_visual_feature_contract():
    table = np.random.default_rng(0).normal(size=(A.N_CLASSES, 4))
    empty = observe(make_state(pos=(1, 1), direction=0))
    V = A.encode_visual(empty, [], table)
    assert V.shape == (32,) and np.all(V[:16] == 0)

    a_obs = observe(make_state(pos=(4, 4), direction=2, texture=0))
    b_obs = observe(make_state(pos=(4, 4), direction=2, texture=3))
    Va = A.encode_visual(a_obs, detect(a_obs), table)
    Vb = A.encode_visual(b_obs, detect(b_obs), table)
    assert Va.shape == Vb.shape == (32,)
    diff = np.flatnonzero(Va != Vb)
    # everything that differs lies in the scenery-dependent blocks (object appearance + texture code)
    assert set(diff) <= set(range(16)) | set(range(16, 24))
    assert np.array_equal(Va[24:], Vb[24:])

    held = observe(make_state(pos=(2, 5), direction=2, knife_held=True))
    Vh = A.encode_visual(held, detect(held), table)
    assert np.array_equal(Vh[28:], table[A.CLASS_INDEX["Knife"]])


# ------------------------------------------------------------ subtask belief


def test_update_subtask_examples(train_episodes):
    ep = replace(train_episodes[0], boundaries=[(0, 5), (5, 9)])
    assert np.array_equal(A.update_subtask("oracle", 6, ep), [0.0, 1.0])
    start = A.one_hot(0, 2)
    assert np.array_equal(A.update_subtask("monotonic", 1, ep, start, 0.0), start)
    assert np.array_equal(A.update_subtask("monotonic", 1, ep, start, 0.9), [0.0, 1.0])
    with pytest.raises(A.ConfigError):
        A.update_subtask("psychic", 0, ep)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), max_size=30))
def test_monotonic_belief_never_regresses(advances):
    from nsif.worldsim.dataset import generate_episode
    from nsif.worldsim.types import Split

    ep = generate_episode(Split.TrainSeen, 1, 0)
    belief = A.update_subtask("monotonic", 0, ep)
    reached = 0
    for t, adv in enumerate(advances, start=1):
        belief = A.update_subtask("monotonic", t, ep, belief, adv)
        n = int(np.argmax(belief))
        assert abs(belief.sum() - 1) < 1e-9
        assert reached <= n <= reached + 1
        reached = n


# ------------------------------------------------------------------- decoder


def ref_decoder_step(params, H, V, hl, a_prev, h, c):
    """Pure-python single decoder step from the stated equations."""
    d = len(h)
    scores = [sum(H[i][j] * h[j] for j in range(d)) / math.sqrt(d) for i in range(len(H))]
    m = max(scores)
    e = [math.exp(s - m) for s in scores]
    w = [v / sum(e) for v in e]
    x = [sum(w[i] * H[i][j] for i in range(len(H))) for j in range(d)]
    u = list(params["act_emb"][a_prev]) + list(hl) + list(V) + x
    z = u + list(h)
    W, b = params["dec_W"], params["dec_b"]
    Hd = len(h)
    a = [b[k] + sum(z[r] * W[r][k] for r in range(len(z))) for k in range(4 * Hd)]
    sig = lambda v: 1 / (1 + math.exp(-v))
    c_new = [sig(a[Hd + k]) * c[k] + sig(a[k]) * math.tanh(a[3 * Hd + k]) for k in range(Hd)]
    h_new = [sig(a[2 * Hd + k]) * math.tanh(c_new[k]) for k in range(Hd)]
    zc = h_new + list(V) + x
    logits = [params["out_b"][k] + sum(zc[r] * params["out_W"][r][k] for r in range(len(zc)))
              for k in range(A.N_ACTIONS)]
    m = max(logits)
    e = [math.exp(v - m) for v in logits]
    return [v / sum(e) for v in e], h_new, c_new


def test_decode_action_matches_hand_unroll():
    cfg = A.AgentConfig(word_dim=2, enc_hidden=1, dec_hidden=2, action_dim=2, hla_dim=2, class_dim=2,
                        scorer_hidden=2, init_scale=0.5)
    params = A.init_params(cfg, 5)
    rng = np.random.default_rng(3)
    H = rng.normal(size=(4, 2))
    V = rng.normal(size=cfg.vis_dim)
    h, c = rng.normal(size=2) * 0.4, rng.normal(size=2) * 0.4
    belief, hla = np.array([0.25, 0.75]), [1, 4]
    probs, state = A.decode_action(params, cfg, H, V, belief, hla, 3, h, c)
    hl = belief @ params["hla_emb"][hla]
    ref_probs, ref_h, ref_c = ref_decoder_step({k: v.tolist() for k, v in params.items()}, H.tolist(),
                                               V.tolist(), hl.tolist(), 3, h.tolist(), c.tolist())
    assert np.allclose(probs, ref_probs, atol=1e-12, rtol=0)
    assert np.allclose(state.h, ref_h, atol=1e-12, rtol=0)
    assert np.allclose(state.c, ref_c, atol=1e-12, rtol=0)
    assert np.array_equal(state.w, np.concatenate([V, state.x]))


def test_zero_head_gives_uniform_actions():
    cfg = A.AgentConfig(**TOY_DIMS)
    params = A.init_params(cfg, 6)
    params["out_W"][:] = 0
    params["out_b"][:] = 0
    rng = np.random.default_rng(0)
    probs, _ = A.decode_action(params, cfg, rng.normal(size=(3, cfg.mem_dim)), rng.normal(size=cfg.vis_dim),
                               A.one_hot(0, 2), [0, 1], A.START, np.zeros(8), np.zeros(8))
    assert probs.shape == (11,) and np.allclose(probs, 1 / 11, atol=1e-15)


def test_one_hot_belief_selects_hla_embedding():
    table = np.random.default_rng(1).normal(size=(len(A.HLAS), 3))
    hla = [2, 0, 5]
    assert np.array_equal(A.one_hot(1, 3) @ table[hla], table[0])


def test_decoder_parity():
    assert check_decoder_parity(0) == []
    assert check_decoder_parity(1) == []


def test_decode_dimension_mismatch():
    cfg = A.AgentConfig(**TOY_DIMS)
    params = A.init_params(cfg, 6)
    with pytest.raises(nk.DimensionMismatch):
        A.decode_action(params, cfg, np.zeros((3, cfg.mem_dim)), np.zeros(5), A.one_hot(0, 1), [0], 0,
                        np.zeros(8), np.zeros(8))


# ------------------------------------------------------------------ selectors


def test_select_object_examples():
    dets = [det(ObjClass.Apple, 0), det(ObjClass.Knife, 1)]
    sel = A.select_object(dets, [APPLE], A.one_hot(0, 1), orthonormal())
    e = math.e
    assert np.allclose(sel.probs, [e / (e + 1), 1 / (e + 1)], atol=1e-15)
    assert np.allclose(sel.probs, [0.7311, 0.2689], atol=5e-5)
    assert sel.m_star == 0 and sel.mask == dets[0].mask

    sel = A.select_object(dets, [APPLE, KNIFE], np.array([0.5, 0.5]), orthonormal())
    assert np.allclose(sel.probs, [0.5, 0.5], atol=1e-15) and sel.m_star == 0

    twins = [det(ObjClass.Apple, 0), det(ObjClass.Apple, 1)]
    sel = A.select_object(twins, [APPLE], A.one_hot(0, 1), orthonormal())
    assert sel.probs[0] == sel.probs[1] and sel.m_star == 0

    with pytest.raises(A.NoDetections):
        A.select_object([], [APPLE], A.one_hot(0, 1), orthonormal())


def test_selector_property_sweep():
    assert check_selector_properties(trials=300, seed=1) == []


def test_class_match_under_margin_condition():
    rng = np.random.default_rng(7)
    for _ in range(200):
        table = rng.normal(size=(A.N_CLASSES, 4))
        target = A.ARGUMENT_CLASSES[int(rng.integers(A.N_CLASSES))]
        if target not in {c.value for c in ObjClass}:
            continue
        r = A.CLASS_INDEX[target]
        scores = table @ table[r]
        others = [c for c in ObjClass if c.value != target]
        dets = [det(ObjClass(target), 0)] + [det(others[int(i)], k + 1) for k, i in
                                            enumerate(rng.integers(len(others), size=3))]
        perm = rng.permutation(len(dets))
        dets = [dets[i] for i in perm]
        margin_ok = all(scores[r] > scores[A.CLASS_INDEX[d.cls.value]] for d in dets if d.cls.value != target)
        frame = SubtaskFrame(HighLevelAction.GotoLocation, target) if target in ("Fridge", "Drawer", "Microwave",
                                                                                   "SinkBasin", "CounterTop",
                                                                                   "DeskLamp") else None
        frame = frame or SubtaskFrame(HighLevelAction.PickupObject, target)
        sel = A.select_object(dets, [frame], A.one_hot(0, 1), table)
        if margin_ok:
            assert dets[sel.m_star].cls.value == target


def test_baseline_zero_weights_select_first():
    cfg = A.AgentConfig(kind="s2spm", **TOY_DIMS)
    params = {k: np.zeros_like(v) for k, v in A.init_params(cfg, 6).items()}
    dets = [det(ObjClass.Apple, 0), det(ObjClass.Knife, 1), det(ObjClass.Mug, 2)]
    sel = A.baseline_select_object(dets, np.ones(8), np.ones(cfg.mem_dim), params)
    assert np.allclose(sel.probs, 1 / 3) and sel.m_star == 0
    with pytest.raises(A.NoDetections):
        A.baseline_select_object([], np.ones(8), np.ones(cfg.mem_dim), params)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_baseline_distribution_valid(M, seed):
    cfg = A.AgentConfig(kind="s2spm", **TOY_DIMS)
    params = A.init_params(cfg, 6, seed=seed)
    rng = np.random.default_rng(seed)
    dets = [det(ObjClass.Apple, m, rng.normal(size=16)) for m in range(M)]
    sel = A.baseline_select_object(dets, rng.normal(size=8), rng.normal(size=cfg.mem_dim), params)
    assert abs(sel.probs.sum() - 1) < 1e-12 and np.all(sel.probs >= 0)


# ------------------------------------------------------------------ progress


def test_progress_heads_zero_weights():
    cfg = A.AgentConfig(**TOY_DIMS)
    params = {k: np.zeros_like(v) for k, v in A.init_params(cfg, 6).items()}
    assert A.progress_heads(params, np.ones(cfg.head_dim)) == (0.5, 0.5)


def test_progress_targets(train_episodes):
    ep = replace(train_episodes[2], expert_actions=[None] * 10, boundaries=[(0, 3), (3, 5), (5, 8), (8, 10)])
    progress, completed = A.progress_targets(ep)
    assert progress[5] == 0.5
    assert completed[5] == 0.5  # two of four subtasks finished
    for ep in train_episodes:
        p, q = A.progress_targets(ep)
        assert np.all(np.diff(p) >= 0) and np.all(np.diff(q) >= 0)
        assert p.min() >= 0 and q.max() <= 1


# ------------------------------------------------------------------ training


@pytest.fixture(scope="module")
def trained(train_episodes):
    cfg = A.AgentConfig(epochs=200, batch_size=4, seed=0)
    return A.train("nsif", train_episodes[:16], cfg)


def test_training_fit_on_training_set(trained, train_episodes):
    hits = total = 0
    for ep in train_episodes[:16]:
        trace = replay(ep)
        session = trained.policy(ep, 0, 0)
        for t, expert in enumerate(ep.expert_actions):
            session.belief = A.one_hot(ep.subtask_at(t), ep.N)
            action = session.act(trace[t][0])
            hits += action.kind == expert.kind
            total += 1
            session.a_prev = A.ACTION_INDEX[expert.kind]
    assert hits / total >= 0.95


def test_training_loss_descends_and_is_deterministic(train_episodes):
    for seed in (0, 1, 2):
        cfg = A.AgentConfig(epochs=4, batch_size=8, seed=seed, **TOY_DIMS)
        agent = A.train("s2spm", train_episodes[:16], cfg)
        assert agent.loss_log[-1] < agent.loss_log[0]
    again = A.train("s2spm", train_episodes[:16], cfg)
    assert again.loss_log == agent.loss_log
    assert all(np.array_equal(again.params[k], agent.params[k]) for k in agent.params)


def test_checkpoint_round_trip(trained, tmp_path, unseen_episodes):
    path = tmp_path / "nsif.npz"
    trained.save(path)
    back = A.Agent.load(path)
    assert back.cfg == trained.cfg and back.vocab.itos == trained.vocab.itos
    ep = unseen_episodes[0]
    trace = replay(ep)
    s1, s2 = trained.policy(ep, 1, 1), back.policy(ep, 1, 1)
    state = trace[ep.boundaries[1][0]][0]
    assert s1.act(state) == s2.act(state)


def test_checkpoint_shape_mismatch_is_config_error(trained, tmp_path):
    path = tmp_path / "bad.npz"
    params = dict(trained.params)
    params["out_b"] = np.zeros(3)
    nk.save_checkpoint(path, params, {"config": trained.cfg.__dict__, "vocab": trained.vocab.to_json()})
    with pytest.raises(A.ConfigError):
        A.Agent.load(path)


def test_rollout_is_deterministic(trained, unseen_episodes):
    from nsif.evalharness import eval_episode

    ep = unseen_episodes[2]
    assert eval_episode(trained, ep) == eval_episode(trained, ep)


def test_no_detections_makes_agent_rotate(trained, unseen_episodes):
    ep = unseen_episodes[0]
    session = trained.policy(ep, 0, 0)
    session.agent = replace(trained, params={**trained.params, "out_b": np.where(
        np.arange(A.N_ACTIONS) == A.ACTION_INDEX[ActionKind.Pickup], 1e3, 0.0)})
    wall_state = replace(ep.init, layout=make_state().layout, objects=make_state().objects,
                         agent_pos=(1, 1), agent_dir=0)
    assert session.act(wall_state).kind == ActionKind.RotateLeft


def test_config_validation():
    with pytest.raises(A.ConfigError):
        A.AgentConfig(kind="gpt").validate()
    with pytest.raises(A.ConfigError):
        A.AgentConfig(dec_hidden=10, enc_hidden=4).validate()
    with pytest.raises(A.ConfigError):
        A.AgentConfig.from_dict({"colour": 1})
