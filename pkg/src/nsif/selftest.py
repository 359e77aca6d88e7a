"""Built-in property and gradient checks (``nsif selftest``).

The toy setups here are also what the test-suite uses for gradient checks.
"""

from __future__ import annotations

from typing import Callable, List, Tuple

import numpy as np

from nsif import agents as A
from nsif import neuralkit as nk
from nsif.evalharness import (
    Category,
    SubtaskResult,
    aggregate,
    evaluate,
    path_weighted,
    robustness_records,
)
from nsif.instructgen import build_vocab, episode_instruction_sets
from nsif.pipeline import annotated_episode
from nsif.worldsim.dataset import dumps_episode
from nsif.worldsim.sim import check_subtask_goal, replay, Outcome
from nsif.worldsim.types import Detection, ObjClass, SubtaskFrame, HighLevelAction, Split

GRAD_TOL = 1e-4
TOY_DIMS = dict(word_dim=5, enc_hidden=4, dec_hidden=8, action_dim=3, hla_dim=3, class_dim=4, scorer_hidden=5)


def toy_episodes(seed: int, count: int = 4, split: Split = Split.TrainSeen):
    return [annotated_episode(split, i, seed, 3) for i in range(count)]


def toy_setup(kind: str, seed: int, subtask_mode: str = "oracle", count: int = 4):
    """(cfg, params, batch, items, vocab) for a small batch at toy dimensions."""
    eps = toy_episodes(seed, count)
    vocab = build_vocab(s for ep in eps for s in episode_instruction_sets(ep))
    cfg = A.AgentConfig(kind=kind, subtask_mode=subtask_mode, seed=seed, batch_size=count, **TOY_DIMS)
    items = [A.episode_tensors(ep, cfg, vocab) for ep in eps]
    params = A.init_params(cfg, len(vocab))
    batch = A.make_batch(items, list(range(count)), cfg.nsif)
    return cfg, params, batch, items, vocab


def train_one_epoch(cfg, params, items, seed: int):
    """A single Adam epoch over ``items`` (batch size from cfg); returns params."""
    state = nk.AdamState(lr=cfg.lr)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(items))
    for lo in range(0, len(order), cfg.batch_size):
        idx = order[lo:lo + cfg.batch_size]
        batch = A.make_batch([items[i] for i in idx], [int(i) for i in idx], cfg.nsif)
        _, grads = A.loss_and_grads(params, cfg, batch)
        nk.adam_update(params, grads, state)
    return params


def full_loss_grad_error(kind: str, seed: int, after_epoch: bool = False, n_coords: int = 40,
                         count: int = 3) -> float:
    cfg, params, batch, items, _ = toy_setup(kind, seed, count=count)
    if after_epoch:
        params = train_one_epoch(cfg, params, items, seed)
    return nk.grad_check(lambda p: A.loss_and_grads(p, cfg, batch), params, n_coords=n_coords, seed=seed,
                         extended=True)


def _det(cls: ObjClass, i: int, features=None) -> Detection:
    feats = tuple(features) if features is not None else tuple(float(v) for v in np.full(16, i))
    return Detection(mask=frozenset({(i, 0)}), cls=cls, features=feats, object_id=i)


def check_selector_properties(trials: int = 200, seed: int = 0) -> List[str]:
    rng = np.random.default_rng(seed)
    classes = list(ObjClass)
    problems = []
    eye = np.eye(A.N_CLASSES)
    for trial in range(trials):
        M = int(rng.integers(1, 7))
        N = int(rng.integers(1, 5))
        dets = [_det(classes[int(rng.integers(len(classes)))], m, rng.normal(size=16)) for m in range(M)]
        frames = [SubtaskFrame(HighLevelAction.PickupObject, classes[int(rng.integers(5))].value) for _ in range(N)]
        belief = rng.dirichlet(np.ones(N))
        table = rng.normal(size=(A.N_CLASSES, 4))
        sel = A.select_object(dets, frames, belief, table)
        if abs(sel.probs.sum() - 1) > 1e-9 or (sel.probs < 0).any():
            problems.append(f"trial {trial}: invalid distribution")
        mutated = [_det(d.cls, m, rng.normal(size=16)) for m, d in enumerate(dets)]
        if not np.array_equal(A.select_object(mutated, frames, belief, table).probs, sel.probs):
            problems.append(f"trial {trial}: depends on attribute features")
        n = int(rng.integers(N))
        onehot = A.one_hot(n, N)
        # a single softmax keeps its argmax under logit scaling; a mixture need not
        plain = A.select_object(dets, frames, onehot, table)
        scaled = A.select_object(dets, frames, onehot, table * np.sqrt(3.0))
        if scaled.m_star != plain.m_star:
            problems.append(f"trial {trial}: argmax changed under positive scaling")
        target = frames[n].r
        if any(d.cls.value == target for d in dets):
            pick = A.select_object(dets, frames, onehot, eye)
            if dets[pick.m_star].cls.value != target:
                problems.append(f"trial {trial}: orthonormal selector missed class {target}")
        perm = rng.permutation(M)
        permuted = A.select_object([dets[i] for i in perm], frames, belief, table)
        if not np.allclose(permuted.probs, sel.probs[perm], atol=1e-12):
            problems.append(f"trial {trial}: not permutation-equivariant")
    return problems


def check_decoder_parity(seed: int = 0) -> List[str]:
    cfg, params, batch, items, vocab = toy_setup("nsif", seed, count=2)
    base_cfg = A.AgentConfig(**{**cfg.__dict__, "kind": "s2spm"})
    base = {k: v for k, v in params.items() if k != "hla_emb"}
    base["dec_W"] = A.decoder_weight(params, cfg, use_subtask=False)
    rng = np.random.default_rng(seed)
    H = rng.normal(size=(5, cfg.mem_dim))
    V = rng.normal(size=cfg.vis_dim)
    h = rng.normal(size=cfg.dec_hidden) * 0.3
    c = rng.normal(size=cfg.dec_hidden) * 0.3
    p1, s1 = A.decode_action(params, cfg, H, V, A.one_hot(0, 2), [0, 1], 3, h, c, use_subtask=False)
    p2, s2 = A.decode_action(base, base_cfg, H, V, None, [0, 1], 3, h, c)
    if not (np.array_equal(p1, p2) and np.array_equal(s1.h, s2.h)):
        return ["decoder without subtask conditioning differs from the baseline decoder"]
    return []


def check_expert_replay(count: int = 200, seed: int = 0) -> List[str]:
    problems = []
    for split in (Split.TrainSeen, Split.ValidUnseen):
        for i in range(count // 2):
            ep = annotated_episode(split, i, seed, 1)
            trace = replay(ep)
            if any(o != Outcome.Ok for _, o in trace):
                problems.append(f"{ep.id}: expert action failed")
            for n, (_, end) in enumerate(ep.boundaries):
                if not check_subtask_goal(trace[end][0], ep, n):
                    problems.append(f"{ep.id}: subtask {n} goal not met at boundary")
    return problems


def check_evaluation_contracts(seed: int = 0) -> List[str]:
    problems = []
    eps = toy_episodes(seed, 10, Split.ValidUnseen)
    results = evaluate(A.ExpertAgent(), eps)
    for cell in aggregate(results).values():
        if cell["success_rate"] != 100.0 or cell["path_weighted"] != 100.0:
            problems.append("expert does not score 100 (100)")
    rng = np.random.default_rng(seed)
    fake = [SubtaskResult(r.episode_id, r.subtask_index, r.subtask_type, r.variant, bool(rng.random() < 0.5),
                          r.L_expert, int(rng.integers(1, 60)), r.split) for r in results]
    for r in fake:
        score = path_weighted(r.success, r.L_expert, r.L_agent)
        if not 0.0 <= score <= float(r.success):
            problems.append("path-weighted score outside [0, success]")
    records = robustness_records(fake, 3)
    if len(records) != len({(r.episode_id, r.subtask_index) for r in fake}):
        problems.append("robustness groups do not partition the results")
    for rec in records:
        expect = Category.I if all(rec.outcomes) else Category.III if not any(rec.outcomes) else Category.II
        if rec.category != expect:
            problems.append("wrong robustness category")
    return problems


def check_regeneration(seed: int = 0, count: int = 20) -> List[str]:
    a = [dumps_episode(annotated_episode(Split.ValidSeen, i, seed, 3)) for i in range(count)]
    b = [dumps_episode(annotated_episode(Split.ValidSeen, i, seed, 3)) for i in range(count)]
    return [] if a == b else ["regeneration is not byte-identical"]


def check_gradients(seeds=(0, 1, 2)) -> List[str]:
    problems = []
    for kind in A.AGENT_KINDS:
        for seed in seeds:
            for after in (False, True):
                err = full_loss_grad_error(kind, seed, after_epoch=after)
                if not err < GRAD_TOL:
                    stage = "after one epoch" if after else "at init"
                    problems.append(f"{kind} seed {seed} {stage}: grad rel. error {err:.2e}")
    return problems


CHECKS: List[Tuple[str, Callable[[], List[str]]]] = [
    ("selector properties", check_selector_properties),
    ("decoder parity", check_decoder_parity),
    ("expert replay", check_expert_replay),
    ("evaluation contracts", check_evaluation_contracts),
    ("byte-identical regeneration", check_regeneration),
    ("gradient checks", check_gradients),
]


def run_selftest(emit: Callable[[str], None] = print) -> int:
    """Run every check; returns the number of failing checks."""
    failures = 0
    for name, fn in CHECKS:
        problems = fn()
        emit(f"{'PASS' if not problems else 'FAIL'} {name}" + (f": {problems[:3]}" if problems else ""))
        failures += bool(problems)
    return failures
