"""Contrastive predictive coding backbone.

Strided conv encoder (raw waveform -> latents z_t), single-layer GRU context
network (z_1..z_t -> c_t) and one bilinear prediction head per future step
k = 1..K.  The loss for step k is InfoNCE with negatives drawn from the same
sequence; the training objective is the sum over k.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Graph, Node, adam_step
from .corpus import Manifest, Waveform
from .errors import SequenceTooShort, ShapeMismatch, TooShort
from .features import FeatureSequence, Origin

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CpcConfig:
    enc_channels: tuple[int, ...] = (64, 64, 64)
    enc_kernels: tuple[int, ...] = (10, 8, 4)
    enc_strides: tuple[int, ...] = (5, 4, 2)
    latent_dim: int = 64
    context_dim: int = 128
    K: int = 12
    n_negatives: int = 10
    epochs: int = 200
    batch_utts: int = 8
    window_samples: int = 8000
    lr: float = 1e-3
    seed: int = 0
    sample_rate_hz: int = 16000

    def validate(self) -> list[str]:
        problems = []
        n = len(self.enc_channels)
        if n == 0 or not (len(self.enc_kernels) == len(self.enc_strides) == n):
            problems.append("enc_channels, enc_kernels and enc_strides must be non-empty and equally long")
        elif self.enc_channels[-1] != self.latent_dim:
            problems.append("latent_dim must equal the last encoder channel count")
        if any(v < 1 for v in (*self.enc_channels, *self.enc_kernels, *self.enc_strides)):
            problems.append("encoder channels, kernels and strides must be >= 1")
        if self.K < 1:
            problems.append("K must be >= 1")
        if self.n_negatives < 1:
            problems.append("n_negatives must be >= 1")
        if self.latent_dim < 1 or self.context_dim < 1:
            problems.append("latent_dim and context_dim must be >= 1")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.batch_utts < 1:
            problems.append("batch_utts must be >= 1")
        if self.lr <= 0:
            problems.append("lr must be positive")
        if not problems:
            steps = latent_length(self, self.window_samples)
            need = max(self.K + 1, self.n_negatives + 1)
            if steps < need:
                problems.append(
                    f"window_samples={self.window_samples} yields {steps} latent steps, need >= {need}"
                )
        return problems

    @property
    def hop_samples(self) -> int:
        return int(np.prod(self.enc_strides))

    @property
    def latent_hop_ms(self) -> float:
        return 1000.0 * self.hop_samples / self.sample_rate_hz


def receptive_field(config: CpcConfig) -> int:
    r = 1
    for k, s in zip(reversed(config.enc_kernels), reversed(config.enc_strides)):
        r = (r - 1) * s + k
    return r


def layer_lengths(config: CpcConfig, n_samples: int) -> list[int]:
    out, L = [], n_samples
    for k, s in zip(config.enc_kernels, config.enc_strides):
        L = ad.conv1d_length(L, k, s) if L >= k else 0
        out.append(L)
    return out


def latent_length(config: CpcConfig, n_samples: int) -> int:
    if n_samples < receptive_field(config):
        return 0
    return layer_lengths(config, n_samples)[-1]


# ---------------------------------------------------------------- GRU op


def gru(x, wx, wh, bx, bh) -> Node:
    """Single-layer GRU over (B, T, D) with zero initial state; gates ordered r, u, n.

    r = σ(x Wx_r + h Wh_r + b), u = σ(x Wx_u + h Wh_u + b),
    n = tanh(x Wx_n + bx_n + r ⊙ (h Wh_n + bh_n)), h' = (1 - u) ⊙ n + u ⊙ h
    """
    g = ad._graph_of(x, wx, wh, bx, bh)
    xv, wxv, whv, bxv, bhv = (ad._val(a) for a in (x, wx, wh, bx, bh))
    if xv.ndim != 3 or wxv.shape[0] != xv.shape[2] or whv.shape[1] != wxv.shape[1]:
        raise ShapeMismatch(f"gru: x {xv.shape}, wx {wxv.shape}, wh {whv.shape}")
    B, T, D = xv.shape
    H = whv.shape[0]
    if wxv.shape[1] != 3 * H or bxv.shape != (3 * H,) or bhv.shape != (3 * H,):
        raise ShapeMismatch("gru: gate parameter shapes inconsistent with hidden size")

    gx = xv @ wxv + bxv
    hs = np.zeros((B, T + 1, H))
    r = np.empty((B, T, H))
    u = np.empty((B, T, H))
    n = np.empty((B, T, H))
    ghn = np.empty((B, T, H))
    for t in range(T):
        h = hs[:, t]
        gh = h @ whv + bhv
        r[:, t] = ad._sigmoid(gx[:, t, :H] + gh[:, :H])
        u[:, t] = ad._sigmoid(gx[:, t, H : 2 * H] + gh[:, H : 2 * H])
        ghn[:, t] = gh[:, 2 * H :]
        n[:, t] = np.tanh(gx[:, t, 2 * H :] + r[:, t] * ghn[:, t])
        hs[:, t + 1] = (1.0 - u[:, t]) * n[:, t] + u[:, t] * h

    def vjp(dout):
        dgx = np.empty((B, T, 3 * H))
        dwh = np.zeros_like(whv)
        dbh = np.zeros_like(bhv)
        dh = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dh = dh + dout[:, t]
            h = hs[:, t]
            rt, ut, nt = r[:, t], u[:, t], n[:, t]
            dan = dh * (1.0 - ut) * (1.0 - nt * nt)
            dau = dh * (h - nt) * ut * (1.0 - ut)
            dar = dan * ghn[:, t] * rt * (1.0 - rt)
            dgx[:, t, :H] = dar
            dgx[:, t, H : 2 * H] = dau
            dgx[:, t, 2 * H :] = dan
            dgh = np.concatenate([dar, dau, dan * rt], axis=1)
            dwh += h.T @ dgh
            dbh += dgh.sum(axis=0)
            dh = dh * ut + dgh @ whv.T
        dx = dgx @ wxv.T
        dwx = xv.reshape(-1, D).T @ dgx.reshape(-1, 3 * H)
        return dx, dwx, dwh, dgx.sum(axis=(0, 1)), dbh

    return g.record("gru", (x, wx, wh, bx, bh), hs[:, 1:], vjp)


# ---------------------------------------------------------------- model


@dataclass
class CpcModel:
    config: CpcConfig
    params: dict[str, np.ndarray] = field(repr=False)

    @property
    def K(self) -> int:
        return self.config.K

    def copy(self) -> "CpcModel":
        return CpcModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def encode(self, waveform: Waveform) -> FeatureSequence:
        n = len(waveform)
        if n < receptive_field(self.config):
            raise TooShort(f"{n} samples < encoder receptive field {receptive_field(self.config)}")
        g = Graph()
        p = {k: g.const(v) for k, v in self.params.items()}
        z = encoder_forward(self.config, p, g.const(waveform.samples[None, :, None]))
        return FeatureSequence(z.value[0], self.config.latent_hop_ms, Origin.CPC_LATENT)

    def contextualize(self, latents: FeatureSequence) -> FeatureSequence:
        z = np.asarray(latents.frames)
        if z.shape[1] != self.config.latent_dim:
            raise ShapeMismatch(f"latents have dim {z.shape[1]}, model expects {self.config.latent_dim}")
        g = Graph()
        p = {k: g.const(v) for k, v in self.params.items()}
        c = context_forward(p, g.const(z[None]))
        return FeatureSequence(c.value[0], latents.frame_hop_ms, Origin.CPC_CONTEXT)

    def features(self, waveform: Waveform) -> FeatureSequence:
        return self.contextualize(self.encode(waveform))


def init_model(config: CpcConfig) -> CpcModel:
    problems = config.validate()
    if problems:
        raise ValueError("; ".join(problems))
    rng = np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}
    cin = 1
    for i, (cout, k) in enumerate(zip(config.enc_channels, config.enc_kernels)):
        params[f"enc.{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / (cin * k)), size=(cout, cin, k))
        params[f"enc.{i}.bias"] = np.zeros(cout)
        cin = cout
    D, H = config.latent_dim, config.context_dim
    bound = 1.0 / np.sqrt(H)
    params["ar.wx"] = rng.uniform(-bound, bound, size=(D, 3 * H))
    params["ar.wh"] = rng.uniform(-bound, bound, size=(H, 3 * H))
    params["ar.bx"] = np.zeros(3 * H)
    params["ar.bh"] = np.zeros(3 * H)
    # small heads: every candidate starts with nearly the same score
    for k in range(1, config.K + 1):
        params[f"head.{k}.weight"] = rng.normal(0.0, 0.01 / np.sqrt(H), size=(H, D))
    return CpcModel(config, params)


def backbone_param_names(params) -> list[str]:
    return [k for k in params if k.startswith(("enc.", "ar."))]


def encoder_forward(config: CpcConfig, p: dict[str, Node], x: Node) -> Node:
    """x: (B, L, 1) raw samples -> (B, T, latent_dim)."""
    h = x
    for i, s in enumerate(config.enc_strides):
        h = ad.relu(ad.conv1d(h, p[f"enc.{i}.weight"], s) + p[f"enc.{i}.bias"])
    return h


def context_forward(p: dict[str, Node], z: Node) -> Node:
    return gru(z, p["ar.wx"], p["ar.wh"], p["ar.bx"], p["ar.bh"])


# ---------------------------------------------------------------- InfoNCE


def sample_negatives(rng: np.random.Generator, batch: int, T: int, k: int, n_negatives: int) -> np.ndarray:
    """(batch, T - k, n_negatives) positions in [0, T), distinct per anchor, never t + k."""
    if T <= k:
        raise SequenceTooShort(f"sequence of {T} steps has no anchor for k={k}")
    if T - 1 < n_negatives:
        raise SequenceTooShort(f"{T} steps cannot supply {n_negatives} distinct negatives")
    A = T - k
    keys = rng.random((batch, A, T - 1))
    picks = np.argsort(keys, axis=-1, kind="stable")[..., :n_negatives]
    pos = (np.arange(A) + k)[None, :, None]
    return picks + (picks >= pos)


def info_nce_step(contexts: Node, latents: Node, head: Node, k: int, n_negatives: int, rng):
    """InfoNCE loss for step ``k`` averaged over anchors; returns (loss node, accuracy).

    contexts (B, T, H), latents (B, T, D), head (H, D).  Candidate 0 is the
    true future z_{t+k}.
    """
    B, T, _ = contexts.shape
    D = latents.shape[2]
    neg = sample_negatives(rng, B, T, k, n_negatives)
    A = T - k
    pos = np.broadcast_to((np.arange(A) + k)[None, :, None], (B, A, 1))
    idx = np.concatenate([pos, neg], axis=-1) + (np.arange(B) * T)[:, None, None]
    pred = contexts[:, :A, :] @ head
    cand = ad.take(latents.reshape(B * T, D), idx)
    scores = (pred.reshape(B, A, 1, D) * cand).sum(axis=-1)
    logp = ad.log_softmax(scores, axis=-1)
    loss = -(logp[:, :, 0].mean())
    sv = scores.value
    acc = float(np.mean(sv[..., 0] > sv[..., 1:].max(axis=-1)))
    return loss, acc


@dataclass
class StepLosses:
    losses: list[float]
    accuracies: list[float]

    @property
    def total(self) -> float:
        return float(sum(self.losses))


def cpc_loss(config: CpcConfig, p: dict[str, Node], x: Node, rng):
    """Summed InfoNCE loss over k = 1..K for a (B, L, 1) batch of windows."""
    z = encoder_forward(config, p, x)
    c = context_forward(p, z)
    total, losses, accs = None, [], []
    for k in range(1, config.K + 1):
        lk, acc = info_nce_step(c, z, p[f"head.{k}.weight"], k, config.n_negatives, rng)
        total = lk if total is None else total + lk
        losses.append(float(lk.value))
        accs.append(acc)
    return total, StepLosses(losses, accs)


# ---------------------------------------------------------------- training


@dataclass
class LossCurve:
    K: int
    epochs: list[StepLosses] = field(default_factory=list)
    n_skipped: int = 0

    @property
    def totals(self) -> list[float]:
        return [e.total for e in self.epochs]

    def to_csv(self) -> str:
        buf = io.StringIO()
        head = ["epoch", *(f"l_{k}" for k in range(1, self.K + 1)), "total"]
        head += [f"acc_{k}" for k in range(1, self.K + 1)]
        buf.write(",".join(head) + "\n")
        for i, e in enumerate(self.epochs, start=1):
            row = [str(i), *map(repr, e.losses), repr(e.total), *map(repr, e.accuracies)]
            buf.write(",".join(row) + "\n")
        return buf.getvalue()


def _load_windows(manifest: Manifest, config: CpcConfig):
    waves, skipped = [], 0
    for utt in manifest.utterances:
        wav = manifest.load_audio(utt, config.sample_rate_hz)
        if len(wav) < config.window_samples:
            log.warning("skipping %s: %d samples < window %d", utt.id, len(wav), config.window_samples)
            skipped += 1
            continue
        waves.append(wav.samples)
    if not waves:
        raise TooShort(f"no utterance is at least {config.window_samples} samples long")
    return waves, skipped


def _train(model: CpcModel, waves, config: CpcConfig, skipped: int):
    rng = np.random.default_rng(config.seed)
    params = {k: v.copy() for k, v in model.params.items()}
    state = AdamState(lr=config.lr)
    curve = LossCurve(config.K, n_skipped=skipped)
    W = config.window_samples
    for _ in range(config.epochs):
        order = rng.permutation(len(waves))
        sums = np.zeros(config.K)
        accs = np.zeros(config.K)
        n_batches = 0
        for lo in range(0, len(order), config.batch_utts):
            batch = order[lo : lo + config.batch_utts]
            starts = [int(rng.integers(0, waves[i].size - W + 1)) for i in batch]
            x = np.stack([waves[i][s : s + W] for i, s in zip(batch, starts)])[:, :, None]
            g = Graph()
            p = {k: g.param(k, v) for k, v in params.items()}
            loss, step = cpc_loss(config, p, g.const(x), rng)
            grads = g.backward(loss)
            params, state = adam_step(params, grads, state)
            sums += step.losses
            accs += step.accuracies
            n_batches += 1
        curve.epochs.append(StepLosses(list(sums / n_batches), list(accs / n_batches)))
    return CpcModel(config, params), curve


def pretrain(model: CpcModel, manifest: Manifest, config: CpcConfig | None = None):
    """Train ``model`` on random windows of every utterance; returns (model, LossCurve)."""
    config = model.config if config is None else config
    _check_compatible(model.config, config)
    problems = config.validate()
    if problems:
        raise ValueError("; ".join(problems))
    waves, skipped = _load_windows(manifest, config)
    if skipped:
        log.warning("%d utterance(s) shorter than the window were skipped", skipped)
    return _train(model, waves, config, skipped)


def finetune_backbone(model: CpcModel, manifest: Manifest, config: CpcConfig | None = None):
    """Continue CPC training of an existing model on another corpus."""
    config = model.config if config is None else config
    if config.epochs == 0:
        return model.copy(), LossCurve(config.K)
    return pretrain(model.copy(), manifest, config)


def _check_compatible(a: CpcConfig, b: CpcConfig):
    arch = ("enc_channels", "enc_kernels", "enc_strides", "latent_dim", "context_dim", "K")
    diff = [f for f in arch if getattr(a, f) != getattr(b, f)]
    if diff:
        raise ValueError(f"training config changes the architecture: {', '.join(diff)}")


def evaluate_cpc(model: CpcModel, manifest: Manifest, seed: int = 0, batch_utts: int | None = None) -> float:
    """Mean summed InfoNCE loss over one pass of fixed random windows (no update)."""
    config = model.config
    waves, _ = _load_windows(manifest, config)
    rng = np.random.default_rng(seed)
    W = config.window_samples
    bs = batch_utts or config.batch_utts
    totals = []
    for lo in range(0, len(waves), bs):
        chunk = waves[lo : lo + bs]
        x = np.stack([w[s : s + W] for w in chunk for s in [int(rng.integers(0, w.size - W + 1))]])
        g = Graph()
        p = {k: g.const(v) for k, v in model.params.items()}
        _, step = cpc_loss(config, p, g.const(x[:, :, None]), rng)
        totals.append(step.total)
    return float(np.mean(totals))


def with_epochs(config: CpcConfig, epochs: int) -> CpcConfig:
    return replace(config, epochs=epochs)
