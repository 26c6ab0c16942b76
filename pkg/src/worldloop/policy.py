"""Decoder-only transformer over interleaved visual embeddings and action
tokens, with training and greedy decoding.

Frames enter through a learned patch embedding (8x8 non-overlapping
patches projected to d_model plus learned position offsets) injected at
the conversation's visual slots; everything else is ordinary token
embedding. Attention is causal. Training minimizes masked next-token
cross-entropy over the supervised agent spans.

Greedy decoding runs on an incremental numpy path with cached keys/values
(a full re-forward per generated token is ~50x slower); a parity test
pins it to the graph forward.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import WorldloopError, autodiff as ad
from . import codec as codec_mod
from .autodiff import Tensor
from .checkpoint import load_arrays, save_arrays
from .codec import ParseError, Scheme, Vocab, build_vocab, make_scheme
from .env.data import EpisodeIndex
from .env.vehicle import ControlSignal, VisionActionPair
from .optim import AdamW
from .prompt import BUILDERS, Conversation

NEG_INF = -1e9


class TrainingDiverged(WorldloopError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    d_model: int = 128
    heads: int = 4
    layers: int = 4
    patch: int = 8
    frame_size: int = 64
    context: int = 448
    vocab_size: int = 0  # filled from the codec vocabulary
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.frame_size % self.patch:
            raise ValueError(f"frame_size {self.frame_size} not divisible by patch {self.patch}")

    @property
    def tokens_per_frame(self) -> int:
        return (self.frame_size // self.patch) ** 2

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


@dataclass
class TrainHyper:
    steps: int = 300
    batch_size: int = 8
    lr: float = 3e-4
    warmup: int = 20
    lr_floor_frac: float = 0.1
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    eval_every: int = 50
    val_windows: int = 96
    val_batch: int = 16


def _init_params(cfg: PolicyConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d, v = cfg.d_model, cfg.vocab_size
    scale = 0.02
    res_scale = scale / np.sqrt(2.0 * cfg.layers)

    def par(arr):
        return Tensor(arr, requires_grad=True)

    p: dict[str, Tensor] = {}
    p["tok_emb"] = par(rng.normal(0, scale, (v, d)))
    p["pos_emb"] = par(rng.normal(0, scale, (cfg.context, d)))
    p["patch.w"] = par(rng.normal(0, scale, (cfg.patch**2, d)))
    p["patch.b"] = par(np.zeros(d))
    p["patch.pos"] = par(rng.normal(0, scale, (cfg.tokens_per_frame, d)))
    for i in range(cfg.layers):
        pre = f"l{i}."
        p[pre + "ln1.g"] = par(np.ones(d))
        p[pre + "ln1.b"] = par(np.zeros(d))
        p[pre + "qkv.w"] = par(rng.normal(0, scale, (d, 3 * d)))
        p[pre + "qkv.b"] = par(np.zeros(3 * d))
        p[pre + "out.w"] = par(rng.normal(0, res_scale, (d, d)))
        p[pre + "out.b"] = par(np.zeros(d))
        p[pre + "ln2.g"] = par(np.ones(d))
        p[pre + "ln2.b"] = par(np.zeros(d))
        p[pre + "mlp1.w"] = par(rng.normal(0, scale, (d, cfg.mlp_ratio * d)))
        p[pre + "mlp1.b"] = par(np.zeros(cfg.mlp_ratio * d))
        p[pre + "mlp2.w"] = par(rng.normal(0, res_scale, (cfg.mlp_ratio * d, d)))
        p[pre + "mlp2.b"] = par(np.zeros(d))
    p["lnf.g"] = par(np.ones(d))
    p["lnf.b"] = par(np.zeros(d))
    # zero head: every position starts at the uniform distribution
    p["head.w"] = par(np.zeros((d, v)))
    p["head.b"] = par(np.zeros(v))
    return p


class PolicyNet:
    def __init__(self, config: PolicyConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        if config.vocab_size <= 0:
            raise ValueError("PolicyConfig.vocab_size must be set from the codec vocabulary")
        self.config = config
        self.seed = seed
        self.params = params if params is not None else _init_params(
            config, np.random.default_rng(np.random.SeedSequence([0x706F6C, seed]))
        )

    # -- embedding ------------------------------------------------------

    def visual_tokenize(self, frame: np.ndarray) -> Tensor:
        """One frame -> (tokens_per_frame, d_model) embeddings."""
        cfg = self.config
        s, ps = cfg.frame_size, cfg.patch
        if frame.shape != (s, s):
            raise ad.ShapeError(f"visual_tokenize: frame {frame.shape} vs configured ({s}, {s})")
        n = s // ps
        patches = frame.reshape(n, ps, n, ps).transpose(0, 2, 1, 3).reshape(n * n, ps * ps)
        proj = ad.linear(Tensor(patches), self.params["patch.w"], self.params["patch.b"])
        return ad.add(proj, self.params["patch.pos"])

    def embed(self, conv: Conversation, frames: list[np.ndarray]) -> Tensor:
        """Conversation -> (L, d) input embeddings with frames injected."""
        cfg = self.config
        n_slots = len(conv.visual_slots)
        frames_needed = {i for s in conv.visual_slots for i in s.frame_indices}
        if len(frames) != len(frames_needed):
            raise ad.ShapeError(
                f"embed: conversation wants {len(frames_needed)} frames over {n_slots} slots, got {len(frames)}"
            )
        if len(conv) > cfg.context:
            raise ad.ShapeError(f"embed: sequence {len(conv)} exceeds context {cfg.context}")
        tok_emb = self.params["tok_emb"]
        pieces: list[Tensor] = []
        pos = 0
        for slot in conv.visual_slots:
            if slot.start > pos:
                pieces.append(ad.embedding(tok_emb, conv.ids[pos : slot.start]))
            vis = [self.visual_tokenize(frames[i]) for i in slot.frame_indices]
            if len(vis) == 1:
                pieces.append(vis[0])
            else:
                fused = ad.mean(ad.stack(vis, axis=0), axis=0)
                pieces.append(fused)
            pos = slot.start + conv.n_img_tokens
        if pos < len(conv):
            pieces.append(ad.embedding(tok_emb, conv.ids[pos:]))
        x = ad.concat(pieces, axis=0) if len(pieces) > 1 else pieces[0]
        pos_slice = ad.slice_axis(self.params["pos_emb"], 0, 0, len(conv))
        return ad.add(x, pos_slice)


    # -- transformer ----------------------------------------------------

    def _blocks(self, x: Tensor, attn_mask: np.ndarray) -> Tensor:
        """Shared trunk: (B, L, d) -> (B, L, vocab) logits."""
        cfg = self.config
        p = self.params
        b_dim, length = x.data.shape[0], x.data.shape[1]
        mask_t = Tensor(attn_mask)
        inv_sqrt = 1.0 / np.sqrt(cfg.head_dim)
        for i in range(cfg.layers):
            pre = f"l{i}."
            h = ad.layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            qkv = ad.linear(h, p[pre + "qkv.w"], p[pre + "qkv.b"])
            d = cfg.d_model
            q = ad.slice_axis(qkv, 2, 0, d)
            k = ad.slice_axis(qkv, 2, d, 2 * d)
            v = ad.slice_axis(qkv, 2, 2 * d, 3 * d)

            def heads(t):
                return ad.transpose(
                    ad.reshape(t, (b_dim, length, cfg.heads, cfg.head_dim)), (0, 2, 1, 3)
                )

            q, k, v = heads(q), heads(k), heads(v)
            # scale q, not the L x L score tensor (10x less traffic)
            scores = ad.matmul(ad.mul(q, inv_sqrt), ad.transpose(k, (0, 1, 3, 2)))
            scores = ad.add(scores, mask_t)
            attn = ad.softmax(scores, axis=-1)
            ctx = ad.matmul(attn, v)
            ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b_dim, length, d))
            x = ad.add(x, ad.linear(ctx, p[pre + "out.w"], p[pre + "out.b"]))
            h = ad.layernorm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            h = ad.gelu(ad.linear(h, p[pre + "mlp1.w"], p[pre + "mlp1.b"]))
            h = ad.linear(h, p[pre + "mlp2.w"], p[pre + "mlp2.b"])
            x = ad.add(x, h)
        x = ad.layernorm(x, p["lnf.g"], p["lnf.b"])
        return ad.linear(x, p["head.w"], p["head.b"])

    def forward(self, conv: Conversation, frames: list[np.ndarray]) -> Tensor:
        """Single conversation -> (L, vocab) logits, causal attention."""
        x = self.embed(conv, frames)
        length = x.data.shape[0]
        mask = _causal_mask(length)
        logits = self._blocks(ad.reshape(x, (1, length, self.config.d_model)), mask)
        return ad.reshape(logits, (length, self.config.vocab_size))

    def forward_batch(self, convs: list[Conversation], frames_list: list[list[np.ndarray]]):
        """Padded batch forward: returns (logits (B, Lmax, V), ids, mask)."""
        lengths = [len(c) for c in convs]
        lmax = max(lengths)
        embeds = []
        ids = np.zeros((len(convs), lmax), dtype=np.int64)
        loss_mask = np.zeros((len(convs), lmax))
        for j, (conv, frames) in enumerate(zip(convs, frames_list)):
            e = self.embed(conv, frames)
            if len(conv) < lmax:
                padding = Tensor(np.zeros((lmax - len(conv), self.config.d_model)))
                e = ad.concat([e, padding], axis=0)
            embeds.append(e)
            ids[j, : lengths[j]] = conv.ids
            loss_mask[j, : lengths[j]] = conv.loss_mask
        x = ad.stack(embeds, axis=0)
        logits = self._blocks(x, _causal_mask(lmax))
        return logits, ids, loss_mask

    def loss_batch(self, convs, frames_list) -> Tensor:
        """Masked next-token cross-entropy over supervised positions."""
        logits, ids, loss_mask = self.forward_batch(convs, frames_list)
        lmax = ids.shape[1]
        pred = ad.slice_axis(logits, 1, 0, lmax - 1)
        return ad.cross_entropy(pred, ids[:, 1:], loss_mask[:, 1:])

    # -- persistence ----------------------------------------------------

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}


def _causal_mask(length: int) -> np.ndarray:
    m = np.triu(np.full((length, length), NEG_INF), k=1)
    return m[None, None, :, :]


# ---------------------------------------------------------------- inference


class _KVCache:
    """Incremental decoder state on plain numpy arrays (no graph)."""

    def __init__(self, net: PolicyNet):
        self.cfg = net.config
        self.w = {k: t.data for k, t in net.params.items()}
        self.k: list[np.ndarray] = [np.zeros((self.cfg.heads, 0, self.cfg.head_dim))] * self.cfg.layers
        self.v: list[np.ndarray] = list(self.k)
        self.length = 0

    def _ln(self, x, g, b, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / np.sqrt(var + eps) * g + b

    def feed(self, emb: np.ndarray) -> np.ndarray:
        """Append (T, d) embeddings (already position-encoded); returns the
        logits of the last position."""
        cfg, w = self.cfg, self.w
        t_new = emb.shape[0]
        x = emb
        offset = self.length
        for i in range(cfg.layers):
            pre = f"l{i}."
            h = self._ln(x, w[pre + "ln1.g"], w[pre + "ln1.b"])
            qkv = h @ w[pre + "qkv.w"] + w[pre + "qkv.b"]
            d = cfg.d_model
            q, k, v = qkv[:, :d], qkv[:, d : 2 * d], qkv[:, 2 * d :]

            def heads(t):
                return t.reshape(t_new, cfg.heads, cfg.head_dim).transpose(1, 0, 2)

            q, k, v = heads(q), heads(k), heads(v)
            self.k[i] = np.concatenate([self.k[i], k], axis=1)
            self.v[i] = np.concatenate([self.v[i], v], axis=1)
            scores = q @ self.k[i].transpose(0, 2, 1) / np.sqrt(cfg.head_dim)
            total = offset + t_new
            cols = np.arange(total)[None, :]
            rows = (offset + np.arange(t_new))[:, None]
            scores = np.where(cols[None] > rows[None], NEG_INF, scores)
            scores -= scores.max(axis=-1, keepdims=True)
            e = np.exp(scores)
            attn = e / e.sum(axis=-1, keepdims=True)
            ctx = (attn @ self.v[i]).transpose(1, 0, 2).reshape(t_new, d)
            x = x + ctx @ w[pre + "out.w"] + w[pre + "out.b"]
            h = self._ln(x, w[pre + "ln2.g"], w[pre + "ln2.b"])
            u = h @ w[pre + "mlp1.w"] + w[pre + "mlp1.b"]
            t_ = np.tanh(ad._GELU_C * (u + 0.044715 * u**3))
            h = (0.5 * u * (1.0 + t_)) @ w[pre + "mlp2.w"] + w[pre + "mlp2.b"]
            x = x + h
        self.length += t_new
        last = self._ln(x[-1:], w["lnf.g"], w["lnf.b"])
        return (last @ w["head.w"] + w["head.b"])[0]


@dataclass
class PredictResult:
    action: ControlSignal
    tokens: list[str]
    parse_failed: bool


DECODE_CAP = 64


def predict_action(
    history: list[VisionActionPair],
    current_frame: np.ndarray,
    bundle: "PolicyBundle",
) -> PredictResult:
    """Greedy decode of the current action. Total: on any parse problem it
    falls back to the previous action and sets parse_failed."""
    if len(history) != 3:
        raise ValueError(f"predict_action needs 3 history pairs, got {len(history)}")
    net, vocab, scheme = bundle.net, bundle.vocab, bundle.scheme
    conv = BUILDERS[bundle.variant](
        history, current_frame, vocab, scheme, net.config.tokens_per_frame
    )
    frames = [p.frame for p in history] + [current_frame]
    with ad.no_grad():
        prefix = net.embed(conv, frames).data
    cache = _KVCache(net)
    logits = cache.feed(prefix)
    stop_id = vocab.id(codec_mod.STOP)
    pos_emb = net.params["pos_emb"].data
    tok_emb = net.params["tok_emb"].data
    generated: list[str] = []
    prev_action = history[-1].action
    parse_failed = False
    limit = min(DECODE_CAP, net.config.context - len(conv))
    hit_stop = False
    for i in range(limit):
        next_id = int(np.argmax(logits))
        if next_id == stop_id:
            hit_stop = True
            break
        generated.append(vocab.token(next_id))
        emb = (tok_emb[next_id] + pos_emb[len(conv) + i])[None, :]
        logits = cache.feed(emb)
    if not hit_stop:
        return PredictResult(prev_action, generated, True)
    try:
        action = codec_mod.decode_action(generated, scheme, prev=prev_action)
    except ParseError:
        return PredictResult(prev_action, generated, True)
    return PredictResult(action, generated, parse_failed)


# ---------------------------------------------------------------- bundle


@dataclass
class PolicyBundle:
    net: PolicyNet
    scheme: Scheme
    variant: str
    vocab: Vocab
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> PolicyConfig:
        return self.net.config


def scheme_to_dict(scheme: Scheme) -> dict:
    from .codec import AbsoluteNumber, Num2English, RelativeDiff, SpecialToken

    if isinstance(scheme, AbsoluteNumber):
        return {"name": "absolute", "decimals": scheme.decimals}
    if isinstance(scheme, RelativeDiff):
        return {"name": "relative", "decimals": scheme.decimals}
    if isinstance(scheme, Num2English):
        return {"name": "english", "decimals": scheme.decimals}
    if isinstance(scheme, SpecialToken):
        return {
            "name": "special",
            "bins": scheme.bins,
            "speed_range": list(scheme.speed_range),
            "steer_range": list(scheme.steer_range),
        }
    raise TypeError(f"unknown scheme {scheme!r}")


def scheme_from_dict(d: dict) -> Scheme:
    return make_scheme(
        d["name"],
        decimals=d.get("decimals", 3),
        bins=d.get("bins", 256),
        speed_range=tuple(d.get("speed_range", (0.0, 15.0))),
        steer_range=tuple(d.get("steer_range", (-0.5, 0.5))),
    )


def save_policy(path, bundle: PolicyBundle):
    path = Path(path)
    meta = {
        "kind": "policy",
        "variant": bundle.variant,
        "scheme": json.dumps(scheme_to_dict(bundle.scheme)),
        "config": json.dumps(asdict(bundle.net.config)),
        "seed": str(bundle.net.seed),
    }
    save_arrays(path, bundle.net.arrays(), meta)
    sidecar = {
        "kind": "policy",
        "variant": bundle.variant,
        "scheme": scheme_to_dict(bundle.scheme),
        "config": asdict(bundle.net.config),
        "seed": bundle.net.seed,
        **bundle.meta,
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_policy(path) -> PolicyBundle:
    arrays, meta = load_arrays(path)
    config = PolicyConfig(**json.loads(meta["config"]))
    scheme = scheme_from_dict(json.loads(meta["scheme"]))
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    net = PolicyNet(config, seed=int(meta.get("seed", "0")), params=params)
    sidecar_path = Path(str(path) + ".json")
    extra = {}
    if sidecar_path.exists():
        extra = json.loads(sidecar_path.read_text())
    return PolicyBundle(net, scheme, meta["variant"], build_vocab(scheme), extra)


# ---------------------------------------------------------------- training


class FrameStore:
    """uint8 frame cache keyed by (episode, t); float64 on access."""

    def __init__(self, index: EpisodeIndex):
        self.index = index
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def get(self, episode: int, t: int) -> np.ndarray:
        key = (episode, t)
        if key not in self._cache:
            row = self.index.by_episode[episode][t]
            frame = self.index.frame(row)
            self._cache[key] = np.round(frame * 255.0).astype(np.uint8)
        return self._cache[key] / 255.0


def _window_conversation(store, index, vocab, scheme, variant, episode, t, n_img):
    rows = index.by_episode[episode]
    pairs = [
        VisionActionPair(None, ControlSignal(rows[i].speed, rows[i].steer), rows[i].t)
        for i in range(t - 3, t)
    ]
    target = ControlSignal(rows[t].speed, rows[t].steer)
    conv = BUILDERS[variant](pairs, None, vocab, scheme, n_img, target_action=target)
    return conv


def _window_frames(store, episode, t) -> list[np.ndarray]:
    return [store.get(episode, i) for i in range(t - 3, t + 1)]


def lr_at(step: int, hyper: TrainHyper) -> float:
    """Linear warmup then cosine decay to lr_floor_frac * lr."""
    if step < hyper.warmup:
        return hyper.lr * (step + 1) / hyper.warmup
    if hyper.steps <= hyper.warmup:
        return hyper.lr
    frac = (step - hyper.warmup) / max(1, hyper.steps - hyper.warmup)
    floor = hyper.lr * hyper.lr_floor_frac
    return floor + 0.5 * (hyper.lr - floor) * (1.0 + np.cos(np.pi * min(frac, 1.0)))


def train_policy(
    index: EpisodeIndex,
    scheme: Scheme,
    variant: str,
    config: PolicyConfig | None = None,
    hyper: TrainHyper | None = None,
    seed: int = 0,
    log=print,
):
    """Train on the manifest's train split; returns (bundle, curve).

    curve rows are (step, train_ce, val_ce), written at every eval point.
    Deterministic given (data, scheme, variant, config, hyper, seed).
    """
    hyper = hyper or TrainHyper()
    vocab = build_vocab(scheme)
    if config is None:
        config = PolicyConfig(vocab_size=vocab.size)
    elif config.vocab_size != vocab.size:
        config = PolicyConfig(**{**asdict(config), "vocab_size": vocab.size})
    net = PolicyNet(config, seed=seed)
    store = FrameStore(index)

    train_windows = index.windows(history=3, split="train")
    if not train_windows:
        raise WorldloopError("train split is empty")
    val_windows = index.windows(history=3, split="val")
    rng = np.random.default_rng(np.random.SeedSequence([0x747261, seed]))
    if val_windows:
        pick = np.random.default_rng(np.random.SeedSequence([0x76616C, seed]))
        sel = pick.choice(len(val_windows), size=min(hyper.val_windows, len(val_windows)), replace=False)
        val_windows = [val_windows[i] for i in sorted(sel)]

    n_img = config.tokens_per_frame
    conv_cache: dict[tuple[int, int], Conversation] = {}

    def conversation(ep, t):
        key = (ep, t)
        if key not in conv_cache:
            conv_cache[key] = _window_conversation(store, index, vocab, scheme, variant, ep, t, n_img)
        return conv_cache[key]

    opt = AdamW(net.params, lr=hyper.lr, weight_decay=hyper.weight_decay)

    def val_ce() -> float:
        if not val_windows:
            return float("nan")
        total, count = 0.0, 0
        with ad.no_grad():
            for i in range(0, len(val_windows), hyper.val_batch):
                chunk = val_windows[i : i + hyper.val_batch]
                convs = [conversation(*wt) for wt in chunk]
                frames = [_window_frames(store, *wt) for wt in chunk]
                loss = net.loss_batch(convs, frames)
                weight = sum(float(c.loss_mask.sum()) for c in convs)
                total += loss.item() * weight
                count += weight
        return total / max(count, 1.0)

    curve: list[tuple[int, float, float]] = []
    running, running_n = 0.0, 0
    t_start = time.time()
    for step_i in range(hyper.steps):
        sel = rng.choice(len(train_windows), size=min(hyper.batch_size, len(train_windows)), replace=False)
        batch = [train_windows[i] for i in sel]
        convs = [conversation(*wt) for wt in batch]
        frames = [_window_frames(store, *wt) for wt in batch]
        loss = net.loss_batch(convs, frames)
        lv = loss.item()
        if not np.isfinite(lv):
            raise TrainingDiverged(f"policy loss became non-finite at step {step_i}")
        opt.zero_grad()
        loss.backward()
        if hyper.grad_clip:
            _clip_grads(net.params, hyper.grad_clip)
        opt.lr = lr_at(step_i, hyper)
        opt.step()
        running += lv
        running_n += 1
        if (step_i + 1) % hyper.eval_every == 0 or step_i + 1 == hyper.steps:
            vce = val_ce()
            curve.append((step_i + 1, running / running_n, vce))
            log(
                f"  policy step {step_i + 1}/{hyper.steps} train_ce {running / running_n:.4f} "
                f"val_ce {vce:.4f} ({time.time() - t_start:.0f}s)"
            )
            running, running_n = 0.0, 0
    bundle = PolicyBundle(net, scheme, variant, vocab, {"train_seed": seed})
    return bundle, curve


def _clip_grads(params: dict[str, Tensor], max_norm: float):
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale


def write_curve_csv(path, curve):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,train_ce,val_ce\n")
        for step_i, tce, vce in curve:
            fh.write(f"{step_i},{tce!r},{vce!r}\n")
