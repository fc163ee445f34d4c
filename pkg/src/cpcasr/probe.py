"""Linear phoneme probe trained with CTC on stacked frame features.

Features (MFCC, or CPC contexts) are tiled into windows of ``width``
consecutive frames, concatenated, and mapped by one affine layer to
log-probabilities over blank + phoneme inventory.  In the ``frozen`` regime
only the probe is optimised; ``finetune`` also updates the CPC encoder and
context network.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Graph, adam_step
from .corpus import BLANK, Manifest, Waveform
from .cpc import CpcModel, backbone_param_names, context_forward, encoder_forward, latent_length
from .ctc import ctc_nll, greedy_decode, is_feasible
from .errors import AllUtterancesInfeasible, ShapeMismatch, TooShort
from .features import FeatureSequence, MfccConfig, frame_length, mfcc

log = logging.getLogger(__name__)

STACK_WIDTH = 8


class FeatureKind(str, enum.Enum):
    MFCC = "mfcc"
    CPC_CONTEXT = "cpc_context"


class Regime(str, enum.Enum):
    FROZEN = "frozen"
    FINETUNE = "finetune"


@dataclass(frozen=True)
class TrainRegime:
    kind: Regime = Regime.FROZEN
    epochs: int = 30
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", Regime(self.kind))
        if self.epochs < 0 or self.lr <= 0:
            raise ValueError("epochs must be >= 0 and lr > 0")


@dataclass
class ProbeModel:
    weight: np.ndarray
    bias: np.ndarray
    symbols: tuple[str, ...]
    feature_kind: FeatureKind
    width: int = STACK_WIDTH
    stride: int = STACK_WIDTH

    def __post_init__(self):
        self.feature_kind = FeatureKind(self.feature_kind)
        V = len(self.symbols)
        if self.symbols[0] != BLANK or self.weight.shape[1] != V or self.bias.shape != (V,):
            raise ShapeMismatch("probe output dimension must be |inventory| + 1 with blank first")
        if self.weight.shape[0] % self.width:
            raise ShapeMismatch("probe input dimension must be a multiple of the stack width")

    @property
    def input_dim(self) -> int:
        return self.weight.shape[0] // self.width

    def label_ids(self, transcript) -> list[int]:
        index = {s: i for i, s in enumerate(self.symbols)}
        return [index[s] for s in transcript]

    def params(self) -> dict[str, np.ndarray]:
        return {"probe.weight": self.weight, "probe.bias": self.bias}

    def with_params(self, params) -> "ProbeModel":
        return ProbeModel(
            params["probe.weight"].copy(),
            params["probe.bias"].copy(),
            self.symbols,
            self.feature_kind,
            self.width,
            self.stride,
        )


def init_probe(inventory, input_dim: int, feature_kind, width: int = STACK_WIDTH, stride: int | None = None):
    """Zero-initialised probe, so every frame starts at the uniform distribution."""
    symbols = (BLANK, *inventory)
    V = len(symbols)
    return ProbeModel(np.zeros((width * input_dim, V)), np.zeros(V), symbols, feature_kind, width, stride or width)


# ---------------------------------------------------------------- stacking


def stacked_length(T: int, width: int = STACK_WIDTH, stride: int | None = None) -> int:
    stride = stride or width
    return 0 if T < width else 1 + (T - width) // stride


def _stack_index(T, width, stride):
    n = stacked_length(T, width, stride)
    if n == 0:
        raise TooShort(f"{T} frames < stack width {width}")
    return np.arange(n)[:, None] * stride + np.arange(width)[None, :]


def stack_frames(features: FeatureSequence, width: int = STACK_WIDTH, stride: int | None = None) -> FeatureSequence:
    """Concatenate ``width`` consecutive frames; with the default stride = width windows tile
    the sequence and a trailing remainder shorter than ``width`` is dropped."""
    stride = stride or width
    idx = _stack_index(features.T, width, stride)
    out = features.frames[idx].reshape(idx.shape[0], width * features.D)
    return FeatureSequence(out, features.frame_hop_ms * stride, features.origin)


def unstack_frames(stacked: FeatureSequence, width: int = STACK_WIDTH) -> np.ndarray:
    """Inverse of tiled stacking: the first width * T' original rows."""
    T, D = stacked.frames.shape
    return stacked.frames.reshape(T * width, D // width)


def stack_node(frames: ad.Node, width: int, stride: int) -> ad.Node:
    """Graph version of stacking for a (T, D) node."""
    T, D = frames.shape
    idx = _stack_index(T, width, stride)
    return ad.take(frames, idx).reshape(idx.shape[0], width * D)


# ---------------------------------------------------------------- feature extraction


def extract_features(backbone: CpcModel | None, feature_kind, waveform: Waveform, mfcc_config: MfccConfig = MfccConfig()):
    kind = FeatureKind(feature_kind)
    if kind is FeatureKind.MFCC:
        return mfcc(waveform, mfcc_config)
    if backbone is None:
        raise ValueError("cpc_context features need a backbone model")
    return backbone.features(waveform)


def feature_frames(backbone, feature_kind, n_samples: int, sample_rate_hz: int, mfcc_config: MfccConfig) -> int:
    """Number of feature frames a waveform of ``n_samples`` yields (0 if too short)."""
    if FeatureKind(feature_kind) is FeatureKind.MFCC:
        flen = frame_length(mfcc_config.frame_ms, sample_rate_hz)
        hop = frame_length(mfcc_config.hop_ms, sample_rate_hz)
        return 0 if n_samples < flen else 1 + (n_samples - flen) // hop
    return latent_length(backbone.config, n_samples)


def probe_log_probs(backbone, probe: ProbeModel, waveform: Waveform, mfcc_config: MfccConfig = MfccConfig()) -> np.ndarray:
    feats = extract_features(backbone, probe.feature_kind, waveform, mfcc_config)
    stacked = stack_frames(feats, probe.width, probe.stride).frames
    logits = stacked @ probe.weight + probe.bias
    m = logits.max(axis=1, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))


def transcribe(backbone, probe: ProbeModel, waveform: Waveform, mfcc_config: MfccConfig = MfccConfig()) -> list[str]:
    return greedy_decode(probe_log_probs(backbone, probe, waveform, mfcc_config), probe.symbols)


# ---------------------------------------------------------------- training


@dataclass
class ProbeHistory:
    epoch_losses: list[float] = field(default_factory=list)
    n_skipped: int = 0
    n_used: int = 0


def _probe_loss(stacked, p, targets):
    logits = stacked @ p["probe.weight"] + p["probe.bias"]
    return ctc_nll(ad.log_softmax(logits, axis=-1), targets)


def train_probe(
    backbone: CpcModel | None,
    feature_kind,
    manifest: Manifest,
    regime: TrainRegime = TrainRegime(),
    mfcc_config: MfccConfig = MfccConfig(),
    width: int = STACK_WIDTH,
    stride: int | None = None,
    inventory=None,
    sample_rate_hz: int = 16000,
):
    """Train a linear CTC probe; returns (probe, backbone, history).

    For ``frozen`` the returned backbone is the input object, untouched.
    Utterances too short to emit their transcript are skipped and counted.
    """
    kind = FeatureKind(feature_kind)
    stride = stride or width
    finetune = regime.kind is Regime.FINETUNE
    if kind is FeatureKind.CPC_CONTEXT and backbone is None:
        raise ValueError("cpc_context features need a backbone model")
    if finetune and kind is not FeatureKind.CPC_CONTEXT:
        raise ValueError("finetune regime needs cpc_context features")

    inventory = tuple(manifest.inventory if inventory is None else inventory)
    input_dim = mfcc_config.n_ceps if kind is FeatureKind.MFCC else backbone.config.context_dim
    probe = init_probe(inventory, input_dim, kind, width, stride)

    items, skipped = [], 0
    for utt in manifest.utterances:
        wav = manifest.load_audio(utt, sample_rate_hz)
        targets = probe.label_ids(utt.transcript)
        T = feature_frames(backbone, kind, len(wav), sample_rate_hz, mfcc_config)
        if not is_feasible(stacked_length(T, width, stride), targets):
            skipped += 1
            continue
        if finetune:
            items.append((wav.samples, targets))
        else:
            feats = extract_features(backbone, kind, wav, mfcc_config)
            items.append((stack_frames(feats, width, stride).frames, targets))
    if skipped:
        log.warning("%d utterance(s) too short for their transcript were skipped", skipped)
    if not items:
        raise AllUtterancesInfeasible(f"all {len(manifest)} utterances are infeasible for CTC")

    params = probe.params()
    bb_names = backbone_param_names(backbone.params) if finetune else []
    if finetune:
        params.update({k: backbone.params[k] for k in bb_names})
    params = {k: v.copy() for k, v in params.items()}
    state = AdamState(lr=regime.lr)
    rng = np.random.default_rng(regime.seed)
    history = ProbeHistory(n_skipped=skipped, n_used=len(items))

    for _ in range(regime.epochs):
        total = 0.0
        for i in rng.permutation(len(items)):
            x, targets = items[i]
            g = Graph()
            p = {k: g.param(k, v) for k, v in params.items()}
            if finetune:
                z = encoder_forward(backbone.config, p, g.const(x[None, :, None]))
                c = context_forward(p, z)
                stacked = stack_node(c.reshape(c.shape[1], c.shape[2]), width, stride)
            else:
                stacked = g.const(x)
            loss = _probe_loss(stacked, p, targets)
            total += float(loss.value)
            params, state = adam_step(params, g.backward(loss), state)
        history.epoch_losses.append(total / len(items))

    probe = probe.with_params(params)
    if finetune:
        new = backbone.copy()
        new.params.update({k: params[k].copy() for k in bb_names})
        backbone = new
    return probe, backbone, history


def decode_manifest(backbone, probe: ProbeModel, manifest: Manifest, mfcc_config: MfccConfig = MfccConfig(), sample_rate_hz: int = 16000):
    """(references, hypotheses) over a manifest; too-short audio decodes to nothing."""
    refs, hyps = [], []
    for utt in manifest.utterances:
        wav = manifest.load_audio(utt, sample_rate_hz)
        try:
            hyp = transcribe(backbone, probe, wav, mfcc_config)
        except TooShort:
            hyp = []
        refs.append(list(utt.transcript))
        hyps.append(hyp)
    return refs, hyps
