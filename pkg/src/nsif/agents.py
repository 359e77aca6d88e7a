"""NS-IF and S2S+PM-style policies sharing one encoder/decoder skeleton.

Both agents encode ``[g ; SEP ; l_1 ; ... ; SEP ; l_N]`` with a BiLSTM, attend
over it with the previous decoder state and run an LSTM action decoder. They
differ in two places:

* NS-IF feeds ``E_b(b_1..N)^T p(s_t)`` into the decoder and grounds
  interactions by matching detection classes against the subtask argument
  ``r_n`` in a shared class embedding table.
* The baseline has no subtask conditioning and scores detections from their
  continuous appearance features with a small MLP.

Training is teacher-forced behaviour cloning over padded batches with a
hand-derived backward pass (see ``loss_and_grads``).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from nsif import neuralkit as nk
from nsif.instructgen import SEP, Vocab, build_vocab, episode_instruction_sets, symbolic_tokens
from nsif.semparse import parse_frames
from nsif.worldsim.detect import FEATURE_DIM, DetectorMode, detect
from nsif.worldsim.expert import interaction_target
from nsif.worldsim.layout import N_ROOM_TEXTURES
from nsif.worldsim.sim import observe, replay
from nsif.worldsim.types import (
    ARGUMENT_CLASSES,
    Action,
    ActionKind,
    Detection,
    Episode,
    HighLevelAction,
    Observation,
    SubtaskFrame,
    WorldState,
)

log = logging.getLogger(__name__)

ACTIONS: Tuple[ActionKind, ...] = tuple(ActionKind)
ACTION_INDEX = {a: i for i, a in enumerate(ACTIONS)}
N_ACTIONS = len(ACTIONS)
START = N_ACTIONS  # extra row of the action embedding used as a_{-1}
HLAS: Tuple[HighLevelAction, ...] = tuple(HighLevelAction)
HLA_INDEX = {b: i for i, b in enumerate(HLAS)}
CLASS_INDEX = {name: i for i, name in enumerate(ARGUMENT_CLASSES)}
N_CLASSES = len(ARGUMENT_CLASSES)
STATIC_DIM = FEATURE_DIM + N_ROOM_TEXTURES + 4
AGENT_KINDS = ("nsif", "s2spm")
SUBTASK_MODES = ("oracle", "monotonic")


class EmptyInstruction(ValueError):
    pass


class NoDetections(LookupError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class AgentConfig:
    kind: str = "nsif"
    word_dim: int = 32
    enc_hidden: int = 32  # per direction, so H has 2 * enc_hidden columns
    dec_hidden: int = 64
    action_dim: int = 32
    hla_dim: int = 32
    class_dim: int = 4
    scorer_hidden: int = 32
    aux_weight: float = 0.5
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    init_scale: float = nk.INIT_SCALE
    seed: int = 0
    subtask_mode: str = "oracle"
    parser_mode: str = "oracle"
    detector_mode: str = "oracle"
    detector_seed: int = 0
    budget: int = 50
    symbolic_input: bool = False

    def validate(self) -> "AgentConfig":
        if self.kind not in AGENT_KINDS:
            raise ConfigError(f"unknown agent kind {self.kind!r}")
        if self.subtask_mode not in SUBTASK_MODES:
            raise ConfigError(f"unknown subtask mode {self.subtask_mode!r}")
        if self.parser_mode not in ("oracle", "rule"):
            raise ConfigError(f"unknown parser mode {self.parser_mode!r}")
        if self.detector_mode not in ("oracle", "noisy"):
            raise ConfigError(f"unknown detector mode {self.detector_mode!r}")
        for name in ("word_dim", "enc_hidden", "dec_hidden", "action_dim", "hla_dim", "class_dim",
                     "scorer_hidden", "epochs", "batch_size", "budget"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.dec_hidden != 2 * self.enc_hidden:
            raise ConfigError("dec_hidden must equal 2 * enc_hidden (attention query is h_{t-1})")
        if self.aux_weight < 0 or self.lr <= 0:
            raise ConfigError("aux_weight must be >= 0 and lr > 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown agent config keys: {sorted(unknown)}")
        return cls(**d).validate()

    @property
    def nsif(self) -> bool:
        return self.kind == "nsif"

    @property
    def vis_dim(self) -> int:
        return STATIC_DIM + self.class_dim

    @property
    def mem_dim(self) -> int:
        return 2 * self.enc_hidden

    @property
    def head_dim(self) -> int:
        return self.dec_hidden + self.vis_dim + self.mem_dim

    @property
    def dec_in_dim(self) -> int:
        return self.action_dim + (self.hla_dim if self.nsif else 0) + self.vis_dim + self.mem_dim

    def detector(self) -> DetectorMode:
        if self.detector_mode == "noisy":
            return DetectorMode.noisy(self.detector_seed)
        return DetectorMode.oracle()


def param_shapes(cfg: AgentConfig, vocab_size: int) -> Dict[str, Tuple[int, ...]]:
    He, Hd, Z = cfg.enc_hidden, cfg.dec_hidden, cfg.head_dim
    shapes = {
        "word_emb": (vocab_size, cfg.word_dim),
        "enc_f_W": (cfg.word_dim + He, 4 * He),
        "enc_f_b": (4 * He,),
        "enc_b_W": (cfg.word_dim + He, 4 * He),
        "enc_b_b": (4 * He,),
        "act_emb": (N_ACTIONS + 1, cfg.action_dim),
        "class_emb": (N_CLASSES, cfg.class_dim),
        "dec_W": (cfg.dec_in_dim + Hd, 4 * Hd),
        "dec_b": (4 * Hd,),
        "out_W": (Z, N_ACTIONS),
        "out_b": (N_ACTIONS,),
        "prog_w": (Z,),
        "prog_b": (1,),
        "comp_w": (Z,),
        "comp_b": (1,),
    }
    if cfg.nsif:
        shapes["hla_emb"] = (len(HLAS), cfg.hla_dim)
        if cfg.subtask_mode == "monotonic":
            shapes["adv_w"] = (Z,)
            shapes["adv_b"] = (1,)
    else:
        shapes.update(
            sel_Wf=(FEATURE_DIM, cfg.scorer_hidden),
            sel_Wh=(Hd, cfg.scorer_hidden),
            sel_Wx=(cfg.mem_dim, cfg.scorer_hidden),
            sel_b1=(cfg.scorer_hidden,),
            sel_w2=(cfg.scorer_hidden,),
        )
    return shapes


def init_params(cfg: AgentConfig, vocab_size: int, seed: Optional[int] = None) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, shape in sorted(param_shapes(cfg, vocab_size).items()):
        if name.endswith("_b") or name == "sel_b1":
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.uniform(-cfg.init_scale, cfg.init_scale, size=shape)
    for name, H in (("enc_f_b", cfg.enc_hidden), ("enc_b_b", cfg.enc_hidden), ("dec_b", cfg.dec_hidden)):
        params[name][H:2 * H] = nk.FORGET_BIAS
    return params


# ------------------------------------------------------------------- encoders


def instruction_ids(goal: Sequence[str], steps: Sequence[Sequence[str]], vocab: Vocab) -> List[int]:
    """Token ids of ``[g ; SEP ; l_1 ; SEP ; ... ; l_N]``."""
    ids = vocab.encode(goal)
    for step in steps:
        ids.append(SEP)
        ids.extend(vocab.encode(step))
    if len(ids) == len(steps) or not ids:
        raise EmptyInstruction("instruction has no word tokens")
    return ids


def _encode_batch(params, cfg: AgentConfig, tokens: np.ndarray, lengths: np.ndarray):
    fwd = nk.LstmParams(params["enc_f_W"], params["enc_f_b"])
    bwd = nk.LstmParams(params["enc_b_W"], params["enc_b_b"])
    return nk.bilstm_forward(fwd, bwd, params["word_emb"][tokens], lengths)


def encode_language(params, cfg: AgentConfig, goal: Sequence[str], steps: Sequence[Sequence[str]], vocab: Vocab) -> np.ndarray:
    ids = np.array([instruction_ids(goal, steps, vocab)])
    H, _, _ = _encode_batch(params, cfg, ids, np.array([ids.shape[1]]))
    return H[0]


def static_visual(obs: Observation, detections: Sequence[Detection]) -> np.ndarray:
    """The untrained part of V_t: object-feature mean, room texture, heading."""
    v = np.zeros(STATIC_DIM)
    if detections:
        v[:FEATURE_DIM] = np.mean([d.features for d in detections], axis=0)
    v[FEATURE_DIM + obs.room_texture] = 1.0
    v[FEATURE_DIM + N_ROOM_TEXTURES + obs.agent_dir] = 1.0
    return v


def held_index(obs: Observation) -> int:
    return -1 if obs.held_class is None else CLASS_INDEX[obs.held_class.value]


def _visual(static: np.ndarray, held: np.ndarray, class_emb: np.ndarray) -> np.ndarray:
    emb = class_emb[np.maximum(held, 0)] * (held >= 0)[..., None]
    return np.concatenate([static, emb], axis=-1)


def encode_visual(obs: Observation, detections: Sequence[Detection], class_table: np.ndarray) -> np.ndarray:
    return _visual(static_visual(obs, detections), np.array(held_index(obs)), class_table)


# ---------------------------------------------------------------- subtask belief


def one_hot(n: int, size: int) -> np.ndarray:
    v = np.zeros(size)
    v[n] = 1.0
    return v


def update_subtask(mode: str, t: int, episode: Episode, belief: Optional[np.ndarray] = None,
                   advance_prob: float = 0.0) -> np.ndarray:
    """p(s_t). Oracle reads the boundaries; Monotonic advances a one-hot belief
    by one subtask when the learned advance probability exceeds 1/2."""
    if mode == "oracle":
        return one_hot(episode.subtask_at(t), episode.N)
    if mode != "monotonic":
        raise ConfigError(f"unknown subtask mode {mode!r}")
    if belief is None:
        return one_hot(0, episode.N)
    n = int(np.argmax(belief))
    if advance_prob > 0.5:
        n = min(n + 1, episode.N - 1)
    return one_hot(n, episode.N)


# ---------------------------------------------------------------------- decoder


@dataclass
class DecoderState:
    h: np.ndarray
    c: np.ndarray
    a_prev: int
    x: np.ndarray
    w: np.ndarray  # [V_t ; x_t]


def decoder_weight(params, cfg: AgentConfig, use_subtask: bool = True) -> np.ndarray:
    """Decoder gate matrix; without subtask conditioning the E_b rows are dropped."""
    W = params["dec_W"]
    if cfg.nsif and not use_subtask:
        lo = cfg.action_dim
        W = np.delete(W, np.s_[lo:lo + cfg.hla_dim], axis=0)
    return W


def decoder_step(params, cfg: AgentConfig, W: np.ndarray, H: np.ndarray, Hmask: np.ndarray,
                 h: np.ndarray, c: np.ndarray, a_prev: np.ndarray, hl: Optional[np.ndarray], V: np.ndarray):
    """One batched decoder step, shared by training and inference."""
    x, _, acache = nk.attend_forward(H, Hmask, h)
    parts = [params["act_emb"][a_prev]]
    if hl is not None:
        parts.append(hl)
    parts.extend([V, x])
    u = np.concatenate(parts, axis=-1)
    h_new, c_new, lcache = nk.lstm_forward(W, params["dec_b"], u, h, c)
    zc = np.concatenate([h_new, V, x], axis=-1)
    logits = zc @ params["out_W"] + params["out_b"]
    return h_new, c_new, x, zc, logits, (acache, lcache)


def decode_action(params, cfg: AgentConfig, H: np.ndarray, V: np.ndarray, belief: Optional[np.ndarray],
                  hla_ids: Sequence[int], a_prev: int, h_prev: np.ndarray, c_prev: np.ndarray,
                  use_subtask: bool = True) -> Tuple[np.ndarray, DecoderState]:
    """Action distribution for one step of a single episode."""
    conditioned = cfg.nsif and use_subtask
    if V.shape[-1] != cfg.vis_dim or H.shape[-1] != cfg.mem_dim or h_prev.shape[-1] != cfg.dec_hidden:
        raise nk.DimensionMismatch("decode_action: input dimensions do not match the config")
    hl = None
    if conditioned:
        if belief is None or len(belief) != len(hla_ids):
            raise nk.DimensionMismatch("belief and high-level actions must have the same length")
        hl = (np.asarray(belief) @ params["hla_emb"][np.asarray(hla_ids)])[None]
    W = decoder_weight(params, cfg, use_subtask)
    h, c, x, zc, logits, _ = decoder_step(
        params, cfg, W, H[None], np.ones((1, H.shape[0]), dtype=bool),
        h_prev[None], c_prev[None], np.array([a_prev]), hl, V[None],
    )
    probs = nk.softmax(logits[0])
    return probs, DecoderState(h[0], c[0], a_prev, x[0], np.concatenate([V, x[0]]))


def progress_heads(params, zc: np.ndarray) -> Tuple[float, float]:
    """(progress, completed) estimates from ``[h_t ; w_t]``."""
    p = nk.sigmoid(np.atleast_1d(zc @ params["prog_w"] + params["prog_b"][0]))
    q = nk.sigmoid(np.atleast_1d(zc @ params["comp_w"] + params["comp_b"][0]))
    return float(p[0]), float(q[0])


def progress_targets(episode: Episode) -> Tuple[np.ndarray, np.ndarray]:
    T, N = episode.T, episode.N
    t = np.arange(T)
    ends = np.array([end for _, end in episode.boundaries])
    completed = (ends[None, :] <= t[:, None]).sum(axis=1) / N
    return t / T, completed


# ------------------------------------------------------------------- selectors


@dataclass
class ObjectSelection:
    probs: np.ndarray
    m_star: int
    mask: frozenset


def _argmax_first(p: np.ndarray) -> int:
    return int(np.flatnonzero(p == p.max())[0])


def selection_probs(class_ids: np.ndarray, arg_ids: np.ndarray, belief: np.ndarray, class_emb: np.ndarray) -> np.ndarray:
    """p(o) = sum_n p(s=n) softmax_m(<E(c_m), E(r_n)>)."""
    logits = class_emb[arg_ids] @ class_emb[class_ids].T  # (N, M)
    return belief @ nk.softmax(logits, axis=-1)


def select_object(detections: Sequence[Detection], frames: Sequence[SubtaskFrame], belief: np.ndarray,
                  class_table: np.ndarray) -> ObjectSelection:
    if not detections:
        raise NoDetections("no detections to select from")
    cls_ids = np.array([CLASS_INDEX[d.cls.value] for d in detections])
    arg_ids = np.array([CLASS_INDEX[f.r] for f in frames])
    p = selection_probs(cls_ids, arg_ids, np.asarray(belief, dtype=np.float64), class_table)
    m = _argmax_first(p)
    return ObjectSelection(p, m, detections[m].mask)


def _scorer_hidden(params, feats: np.ndarray, h: np.ndarray, x: np.ndarray) -> np.ndarray:
    ctx = h @ params["sel_Wh"] + x @ params["sel_Wx"] + params["sel_b1"]
    return np.tanh(feats @ params["sel_Wf"] + ctx[..., None, :])


def baseline_select_object(detections: Sequence[Detection], h: np.ndarray, x: np.ndarray, params) -> ObjectSelection:
    if not detections:
        raise NoDetections("no detections to select from")
    feats = np.array([d.features for d in detections])
    scores = _scorer_hidden(params, feats, h, x) @ params["sel_w2"]
    p = nk.softmax(scores)
    m = _argmax_first(p)
    return ObjectSelection(p, m, detections[m].mask)


# ------------------------------------------------------------- training tensors


@dataclass
class EpisodeTensors:
    """Everything the teacher-forced loss needs from one episode."""

    T: int
    N: int
    instr: List[np.ndarray]  # one id sequence per instruction variant
    hla: np.ndarray  # (N,)
    args: np.ndarray  # (N,) class ids of r_n
    seg: np.ndarray  # (T,) subtask index of each step
    a_prev: np.ndarray
    a_tgt: np.ndarray
    static: np.ndarray  # (T, STATIC_DIM)
    held: np.ndarray  # (T,)
    progress: np.ndarray
    completed: np.ndarray
    advance: np.ndarray  # (T,) 1 if step t+1 starts a new subtask
    # interaction steps with a detectable expert target
    sel_t: np.ndarray
    sel_cls: List[np.ndarray]
    sel_feat: List[np.ndarray]
    sel_tgt: np.ndarray
    sel_nsif: np.ndarray  # detection class equals the subtask argument


def _instruction_variants(ep: Episode, cfg: AgentConfig, vocab: Vocab) -> List[np.ndarray]:
    if cfg.symbolic_input:
        steps = symbolic_tokens(ep.frames)
        return [np.array(instruction_ids([], steps, vocab))]
    return [np.array(instruction_ids(s.goal, s.steps, vocab)) for s in episode_instruction_sets(ep)]


def episode_tensors(ep: Episode, cfg: AgentConfig, vocab: Vocab) -> EpisodeTensors:
    mode = cfg.detector()
    trace = replay(ep)
    T = ep.T
    static = np.zeros((T, STATIC_DIM))
    held = np.zeros(T, dtype=np.int64)
    seg = np.array([ep.subtask_at(t) for t in range(T)])
    a_tgt = np.array([ACTION_INDEX[a.kind] for a in ep.expert_actions])
    a_prev = np.concatenate([[START], a_tgt[:-1]])
    starts = {start for start, _ in ep.boundaries}
    advance = np.array([1.0 if t + 1 in starts else 0.0 for t in range(T)])
    sel_t, sel_cls, sel_feat, sel_tgt, sel_nsif = [], [], [], [], []
    for t in range(T):
        obs = observe(trace[t][0])
        dets = detect(obs, mode)
        static[t] = static_visual(obs, dets)
        held[t] = held_index(obs)
        target = interaction_target(ep, t)
        if target is None:
            continue
        idx = [m for m, d in enumerate(dets) if d.object_id == target]
        if not idx:
            continue
        sel_t.append(t)
        sel_cls.append(np.array([CLASS_INDEX[d.cls.value] for d in dets]))
        sel_feat.append(np.array([d.features for d in dets]))
        sel_tgt.append(idx[0])
        sel_nsif.append(dets[idx[0]].cls.value == ep.frames[seg[t]].r)
    progress, completed = progress_targets(ep)
    return EpisodeTensors(
        T=T, N=ep.N, instr=_instruction_variants(ep, cfg, vocab),
        hla=np.array([HLA_INDEX[f.b] for f in ep.frames]),
        args=np.array([CLASS_INDEX[f.r] for f in ep.frames]),
        seg=seg, a_prev=a_prev, a_tgt=a_tgt, static=static, held=held,
        progress=progress, completed=completed, advance=advance,
        sel_t=np.array(sel_t, dtype=np.int64), sel_cls=sel_cls, sel_feat=sel_feat,
        sel_tgt=np.array(sel_tgt, dtype=np.int64), sel_nsif=np.array(sel_nsif, dtype=bool),
    )


@dataclass
class Batch:
    tokens: np.ndarray  # (B, L)
    lengths: np.ndarray
    mask: np.ndarray  # (B, Tm) valid steps
    a_prev: np.ndarray
    a_tgt: np.ndarray
    static: np.ndarray
    held: np.ndarray
    belief: np.ndarray  # (B, Tm, Nm)
    hla: np.ndarray  # (B, Nm)
    args: np.ndarray  # (B, Nm)
    progress: np.ndarray
    completed: np.ndarray
    advance: np.ndarray
    adv_mask: np.ndarray
    # selection per step: (B, Tm, Mm) arrays, target -1 where unsupervised
    det_cls: np.ndarray
    det_feat: np.ndarray
    det_mask: np.ndarray
    sel_tgt: np.ndarray


def make_batch(items: Sequence[EpisodeTensors], variants: Sequence[int], nsif: bool) -> Batch:
    B = len(items)
    L = max(len(it.instr[k % len(it.instr)]) for it, k in zip(items, variants))
    Tm = max(it.T for it in items)
    Nm = max(it.N for it in items)
    Mm = max([len(c) for it in items for c in it.sel_cls] + [1])
    tokens = np.zeros((B, L), dtype=np.int64)
    lengths = np.zeros(B, dtype=np.int64)
    mask = np.zeros((B, Tm), dtype=bool)
    a_prev = np.full((B, Tm), START, dtype=np.int64)
    a_tgt = np.zeros((B, Tm), dtype=np.int64)
    static = np.zeros((B, Tm, STATIC_DIM))
    held = np.full((B, Tm), -1, dtype=np.int64)
    belief = np.zeros((B, Tm, Nm))
    hla = np.zeros((B, Nm), dtype=np.int64)
    args = np.zeros((B, Nm), dtype=np.int64)
    progress = np.zeros((B, Tm))
    completed = np.zeros((B, Tm))
    advance = np.zeros((B, Tm))
    adv_mask = np.zeros((B, Tm), dtype=bool)
    det_cls = np.zeros((B, Tm, Mm), dtype=np.int64)
    det_feat = np.zeros((B, Tm, Mm, FEATURE_DIM))
    det_mask = np.zeros((B, Tm, Mm), dtype=bool)
    det_mask[..., 0] = True  # keeps padded softmaxes finite
    sel_tgt = np.full((B, Tm), -1, dtype=np.int64)
    for b, (it, k) in enumerate(zip(items, variants)):
        ids = it.instr[k % len(it.instr)]
        tokens[b, :len(ids)] = ids
        lengths[b] = len(ids)
        T = it.T
        mask[b, :T] = True
        a_prev[b, :T] = it.a_prev
        a_tgt[b, :T] = it.a_tgt
        static[b, :T] = it.static
        held[b, :T] = it.held
        belief[b, np.arange(T), it.seg] = 1.0
        hla[b, :it.N] = it.hla
        args[b, :it.N] = it.args
        progress[b, :T] = it.progress
        completed[b, :T] = it.completed
        advance[b, :T] = it.advance
        adv_mask[b, :T - 1] = True
        for j, t in enumerate(it.sel_t):
            if nsif and not it.sel_nsif[j]:
                continue
            m = len(it.sel_cls[j])
            det_cls[b, t, :m] = it.sel_cls[j]
            det_feat[b, t, :m] = it.sel_feat[j]
            det_mask[b, t, :m] = True
            sel_tgt[b, t] = it.sel_tgt[j]
    return Batch(tokens, lengths, mask, a_prev, a_tgt, static, held, belief, hla, args,
                 progress, completed, advance, adv_mask, det_cls, det_feat, det_mask, sel_tgt)


# ------------------------------------------------------------ loss and backward


def loss_and_grads(params: Dict[str, np.ndarray], cfg: AgentConfig, batch: Batch,
                   need_grads: bool = True) -> Tuple[float, Optional[Dict[str, np.ndarray]]]:
    """Teacher-forced loss over a padded batch and its exact gradient.

    loss = mean action CE + mean selection CE + aux_weight * (progress MSE +
    completed MSE) [+ mean advance BCE in monotonic mode]. Per-step head
    gradients are formed during the forward sweep because they only depend
    on that step; the recurrent chain is then swept backwards once.
    """
    B, Tm = batch.mask.shape
    Hd, VD = cfg.dec_hidden, cfg.vis_dim
    lam = cfg.aux_weight
    nsif = cfg.nsif
    monotonic = nsif and cfg.subtask_mode == "monotonic"
    grads = {k: np.zeros_like(v) for k, v in params.items()} if need_grads else None

    n_steps = max(int(batch.mask.sum()), 1)
    sel_on = (batch.sel_tgt >= 0) & batch.mask
    n_sel = max(int(sel_on.sum()), 1)
    n_adv = max(int((batch.adv_mask & batch.mask).sum()), 1)
    maskf = batch.mask.astype(float)

    H, Hmask, enc_cache = _encode_batch(params, cfg, batch.tokens, batch.lengths)
    W = params["dec_W"]
    Eb = params["hla_emb"][batch.hla] if nsif else None
    Er = params["class_emb"][batch.args]  # (B, Nm, Dc)
    h = np.zeros((B, Hd))
    c = np.zeros((B, Hd))

    total = 0.0
    caches = []
    for t in range(Tm):
        m = maskf[:, t]
        hl = np.einsum("bn,bnd->bd", batch.belief[:, t], Eb) if nsif else None
        V = _visual(batch.static[:, t], batch.held[:, t], params["class_emb"])
        h, c, x, zc, logits, cache = decoder_step(params, cfg, W, H, Hmask, h, c, batch.a_prev[:, t], hl, V)

        logp = nk.log_softmax(logits)
        rows = np.arange(B)
        total += -np.sum(logp[rows, batch.a_tgt[:, t]] * m) / n_steps
        dzc = np.zeros_like(zc)
        if need_grads:
            dlogits = np.exp(logp)
            dlogits[rows, batch.a_tgt[:, t]] -= 1.0
            dlogits *= (m / n_steps)[:, None]
            grads["out_W"] += zc.T @ dlogits
            grads["out_b"] += dlogits.sum(axis=0)
            dzc += dlogits @ params["out_W"].T

        heads = [("prog", batch.progress[:, t]), ("comp", batch.completed[:, t])]
        for name, target in heads:
            y = nk.sigmoid(zc @ params[f"{name}_w"] + params[f"{name}_b"][0])
            total += lam * np.sum(m * (y - target) ** 2) / n_steps
            if need_grads:
                dpre = lam * 2.0 * (y - target) * y * (1.0 - y) * m / n_steps
                grads[f"{name}_w"] += zc.T @ dpre
                grads[f"{name}_b"] += dpre.sum()
                dzc += dpre[:, None] * params[f"{name}_w"]
        if monotonic:
            am = m * batch.adv_mask[:, t]
            pre = zc @ params["adv_w"] + params["adv_b"][0]
            y = batch.advance[:, t]
            # BCE with logits, numerically stable form
            total += np.sum(am * (np.maximum(pre, 0) - pre * y + np.log1p(np.exp(-np.abs(pre))))) / n_adv
            if need_grads:
                dpre = (nk.sigmoid(pre) - y) * am / n_adv
                grads["adv_w"] += zc.T @ dpre
                grads["adv_b"] += dpre.sum()
                dzc += dpre[:, None] * params["adv_w"]

        dx_sel = None
        dh_sel = None
        on = sel_on[:, t]
        if on.any():
            tgt = np.maximum(batch.sel_tgt[:, t], 0)
            dmask = batch.det_mask[:, t]
            w_on = on / n_sel
            if nsif:
                Ec = params["class_emb"][batch.det_cls[:, t]]  # (B, Mm, Dc)
                S = np.einsum("bnd,bmd->bnm", Er, Ec)
                P = nk.softmax(S, dmask[:, None, :])
                bel = batch.belief[:, t]
                po = np.einsum("bn,bnm->bm", bel, P)
                pt = po[rows, tgt]
                total += -np.sum(w_on * np.log(np.where(on, pt, 1.0)))
                if need_grads:
                    dpo = np.zeros_like(po)
                    dpo[rows, tgt] = -w_on / np.where(on, pt, 1.0)
                    dP = bel[:, :, None] * dpo[:, None, :]
                    dS = P * (dP - np.sum(P * dP, axis=-1, keepdims=True))
                    np.add.at(grads["class_emb"], batch.det_cls[:, t], np.einsum("bnm,bnd->bmd", dS, Er))
                    np.add.at(grads["class_emb"], batch.args, np.einsum("bnm,bmd->bnd", dS, Ec))
            else:
                feats = batch.det_feat[:, t]
                a = _scorer_hidden(params, feats, h, x)  # (B, Mm, Hs)
                scores = a @ params["sel_w2"]
                logq = nk.log_softmax(scores, dmask)
                total += -np.sum(w_on * logq[rows, tgt])
                if need_grads:
                    ds = np.exp(logq)
                    ds[rows, tgt] -= 1.0
                    ds *= w_on[:, None]
                    grads["sel_w2"] += np.einsum("bm,bmk->k", ds, a)
                    dpre = ds[..., None] * params["sel_w2"] * (1.0 - a * a)
                    grads["sel_Wf"] += np.einsum("bmf,bmk->fk", feats, dpre)
                    dctx = dpre.sum(axis=1)
                    grads["sel_b1"] += dctx.sum(axis=0)
                    grads["sel_Wh"] += h.T @ dctx
                    grads["sel_Wx"] += x.T @ dctx
                    dh_sel = dctx @ params["sel_Wh"].T
                    dx_sel = dctx @ params["sel_Wx"].T
        if need_grads:
            dh_loc = dzc[:, :Hd]
            dV = dzc[:, Hd:Hd + VD]
            dx = dzc[:, Hd + VD:]
            if dh_sel is not None:
                dh_loc = dh_loc + dh_sel
                dx = dx + dx_sel
            caches.append((cache, dh_loc, dV, dx))

    if not need_grads:
        return total, None

    gW = grads["dec_W"]
    gb = grads["dec_b"]
    dH = np.zeros_like(H)
    dh_next = np.zeros((B, Hd))
    dc_next = np.zeros((B, Hd))
    Da = cfg.action_dim
    Db = cfg.hla_dim if nsif else 0
    dEb = np.zeros_like(Eb) if nsif else None
    for t in reversed(range(Tm)):
        (acache, lcache), dh_loc, dV, dx = caches[t]
        du, dh_prev, dc_next = nk.lstm_backward(W, lcache, dh_loc + dh_next, dc_next, gW, gb)
        np.add.at(grads["act_emb"], batch.a_prev[:, t], du[:, :Da])
        if nsif:
            dEb += batch.belief[:, t, :, None] * du[:, None, Da:Da + Db]
        dV = dV + du[:, Da + Db:Da + Db + VD]
        dx = dx + du[:, Da + Db + VD:]
        held = batch.held[:, t]
        has = held >= 0
        if has.any():
            np.add.at(grads["class_emb"], held[has], dV[has, STATIC_DIM:])
        dHt, dq = nk.attend_backward(acache, dx)
        dH += dHt
        dh_next = dh_prev + dq
    if nsif:
        np.add.at(grads["hla_emb"], batch.hla, dEb)

    fwd = nk.LstmParams(params["enc_f_W"], params["enc_f_b"])
    bwd = nk.LstmParams(params["enc_b_W"], params["enc_b_b"])
    demb = nk.bilstm_backward(
        fwd, bwd, enc_cache, dH,
        (grads["enc_f_W"], grads["enc_f_b"]), (grads["enc_b_W"], grads["enc_b_b"]),
    )
    np.add.at(grads["word_emb"], batch.tokens, demb)
    return total, grads


# --------------------------------------------------------------------- training


@dataclass
class Agent:
    cfg: AgentConfig
    params: Dict[str, np.ndarray]
    vocab: Vocab
    loss_log: List[float] = field(default_factory=list)
    _prefix_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def kind(self) -> str:
        return self.cfg.kind

    def save(self, path: Path, extra: Optional[dict] = None) -> None:
        meta = {"config": asdict(self.cfg), "vocab": self.vocab.to_json(), "loss_log": self.loss_log}
        if extra:
            meta["extra"] = extra
        nk.save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path: Path) -> "Agent":
        params, meta = nk.load_checkpoint(path)
        cfg = AgentConfig.from_dict(meta["config"])
        vocab = Vocab.from_json(meta["vocab"])
        expected = param_shapes(cfg, len(vocab))
        try:
            params, meta = nk.load_checkpoint(path, expected)
        except nk.CheckpointError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(cfg, params, vocab, list(meta.get("loss_log", [])))

    def policy(self, episode: Episode, k: int, n: int) -> "NeuralSession":
        return NeuralSession(self, episode, k, n)


def train(agent_kind: str, dataset: Sequence[Episode], config: Optional[AgentConfig] = None,
          vocab: Optional[Vocab] = None) -> Agent:
    """Behaviour cloning with Adam; one random instruction variant per episode per epoch."""
    cfg = AgentConfig(**asdict(config)) if config is not None else AgentConfig()
    cfg.kind = agent_kind
    cfg.validate()
    if not dataset:
        raise ConfigError("empty training set")
    if vocab is None:
        corpus = [s for ep in dataset for s in episode_instruction_sets(ep)]
        if cfg.symbolic_input:
            vocab = Vocab(tok for ep in dataset for step in symbolic_tokens(ep.frames) for tok in step)
        else:
            vocab = build_vocab(corpus)
    items = [episode_tensors(ep, cfg, vocab) for ep in dataset]
    params = init_params(cfg, len(vocab))
    state = nk.AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    loss_log = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(items))
        variants = rng.integers(0, 1 << 30, size=len(items))
        total, count = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            batch = make_batch([items[i] for i in idx], [int(variants[i]) for i in idx], cfg.nsif)
            loss, grads = loss_and_grads(params, cfg, batch)
            if not np.isfinite(loss):
                raise nk.NonFiniteLoss(f"epoch {epoch}: loss {loss}")
            nk.adam_update(params, grads, state)
            total += float(loss) * len(idx)
            count += len(idx)
        loss_log.append(float(total / count))
        log.info("%s epoch %d loss %.4f", cfg.kind, epoch + 1, loss_log[-1])
    return Agent(cfg, params, vocab, loss_log)


# ------------------------------------------------------------------- inference


class NeuralSession:
    """Controls one (episode, instruction variant, subtask) rollout.

    The decoder state at the subtask start comes from teacher-forcing the
    expert prefix, exactly as during training.
    """

    def __init__(self, agent: Agent, episode: Episode, k: int, n: int):
        self.agent = agent
        cfg = agent.cfg
        self.cfg = cfg
        self.episode = episode
        self.n = n
        self.mode = cfg.detector()
        params = agent.params
        if cfg.symbolic_input:
            ids = instruction_ids([], symbolic_tokens(episode.frames), agent.vocab)
        else:
            sets = episode_instruction_sets(episode)
            ids = instruction_ids(sets[k].goal, sets[k].steps, agent.vocab)
        self.H = _encode_batch(params, cfg, np.array([ids]), np.array([len(ids)]))[0]
        self.Hmask = np.ones((1, len(ids)), dtype=bool)
        self.frames = parse_frames(episode, k, cfg.parser_mode) or list(episode.frames)
        self.hla = np.array([HLA_INDEX[f.b] for f in self.frames])
        self.W = params["dec_W"]
        key = (episode.id, k)
        if key not in agent._prefix_cache:
            agent._prefix_cache.clear()
            agent._prefix_cache[key] = self._prefixes()
        h, c, self.a_prev, self.belief, self.adv = agent._prefix_cache[key][n]
        self.h, self.c = h.copy(), c.copy()
        if cfg.subtask_mode == "oracle" or not cfg.nsif:
            self.belief = one_hot(n, episode.N)

    def _step(self, static: np.ndarray, held: int, belief: np.ndarray):
        params = self.agent.params
        hl = (belief @ params["hla_emb"][self.hla])[None] if self.cfg.nsif else None
        V = _visual(static[None], np.array([held]), params["class_emb"])
        h, c, x, zc, logits, _ = decoder_step(
            params, self.cfg, self.W, self.H, self.Hmask, self.h, self.c, np.array([self.a_prev]), hl, V
        )
        self.h, self.c = h, c
        adv = 0.0
        if "adv_w" in params:
            adv = float(nk.sigmoid(np.atleast_1d(zc[0] @ params["adv_w"] + params["adv_b"][0]))[0])
        return logits[0], x, adv

    def _prefixes(self) -> list:
        """Teacher-forced decoder state at the start of every subtask."""
        ep = self.episode
        Hd = self.cfg.dec_hidden
        self.h, self.c, self.a_prev = np.zeros((1, Hd)), np.zeros((1, Hd)), START
        belief, adv = one_hot(0, ep.N), 0.0
        starts = {start: n for n, (start, _) in enumerate(ep.boundaries)}
        out = [None] * ep.N
        last = ep.boundaries[-1][0]
        trace = replay(ep, last)
        for t in range(last + 1):
            if self.cfg.subtask_mode == "oracle":
                belief = one_hot(ep.subtask_at(t), ep.N)
            elif t > 0:
                belief = update_subtask("monotonic", t, ep, belief, adv)
            if t in starts:
                out[starts[t]] = (self.h, self.c, self.a_prev, belief, adv)
            if t == last:
                break
            obs = observe(trace[t][0])
            dets = detect(obs, self.mode)
            _, _, adv = self._step(static_visual(obs, dets), held_index(obs), belief)
            self.a_prev = ACTION_INDEX[ep.expert_actions[t].kind]
        return out

    def act(self, state: WorldState) -> Action:
        cfg = self.cfg
        if cfg.nsif and cfg.subtask_mode == "monotonic" and state.t > self.episode.boundaries[self.n][0]:
            self.belief = update_subtask("monotonic", state.t, self.episode, self.belief, self.adv)
        obs = observe(state)
        dets = detect(obs, self.mode)
        logits, x, self.adv = self._step(static_visual(obs, dets), held_index(obs), self.belief)
        kind = ACTIONS[_argmax_first(logits)]
        self.a_prev = ACTION_INDEX[kind]
        if kind not in _INTERACTIONS:
            return Action(kind)
        try:
            if cfg.nsif:
                sel = select_object(dets, self.frames, self.belief, self.agent.params["class_emb"])
            else:
                sel = baseline_select_object(dets, self.h[0], x[0], self.agent.params)
        except NoDetections:
            self.a_prev = ACTION_INDEX[ActionKind.RotateLeft]
            return Action(ActionKind.RotateLeft)
        return Action(kind, sel.mask)


_INTERACTIONS = frozenset(
    {ActionKind.Pickup, ActionKind.Put, ActionKind.Slice, ActionKind.ToggleOn, ActionKind.ToggleOff,
     ActionKind.Open, ActionKind.Close}
)


def act(session, state: WorldState) -> Action:
    """One greedy policy step (observe, detect, decode, ground)."""
    return session.act(state)


class ExpertSession:
    def __init__(self, episode: Episode, n: int):
        start, end = episode.boundaries[n]
        self.actions = list(episode.expert_actions[start:end])

    def act(self, state: WorldState) -> Action:
        return self.actions.pop(0) if self.actions else Action(ActionKind.Stop)


class ExpertAgent:
    """Replays the demonstration's own segment for each subtask."""

    kind = "expert"

    def policy(self, episode: Episode, k: int, n: int) -> ExpertSession:
        return ExpertSession(episode, n)
