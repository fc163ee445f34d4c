"""Audio corpora: PCM16 WAV I/O, TSV manifests, synthetic tone corpora and splits.

Manifest format is one utterance per line, UTF-8, no header::

    id<TAB>relative/audio.wav<TAB>p1 p2 p3

Audio paths are relative to the directory holding the manifest.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DuplicateId,
    EmptySplit,
    EmptyTranscript,
    IoError,
    NotWav,
    ParseError,
    SampleRateMismatch,
    Truncated,
    UnsupportedFormat,
)

BLANK = "<blank>"
DEFAULT_SAMPLE_RATE = 16000


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64)
        if x.ndim != 1 or x.size < 1:
            raise ValueError("waveform must be a non-empty 1-D sequence")
        if not np.all(np.abs(x) <= 1.0):
            raise ValueError("samples must lie in [-1, 1]")
        if int(self.sample_rate_hz) <= 0:
            raise ValueError("sample rate must be positive")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class Utterance:
    id: str
    audio_path: str
    transcript: tuple[str, ...]


@dataclass(frozen=True)
class Manifest:
    root_dir: Path
    utterances: tuple[Utterance, ...]
    inventory: tuple[str, ...] = field(default=())

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def audio_file(self, utt: Utterance) -> Path:
        return Path(self.root_dir) / utt.audio_path

    def load_audio(self, utt: Utterance, sample_rate_hz: int | None = None) -> Waveform:
        wav = decode_wav(self.audio_file(utt))
        if sample_rate_hz is not None and wav.sample_rate_hz != sample_rate_hz:
            raise SampleRateMismatch(
                f"{utt.audio_path}: {wav.sample_rate_hz} Hz, expected {sample_rate_hz} Hz"
            )
        return wav

    def subset(self, n: int) -> "Manifest":
        """First ``n`` utterances, keeping the full inventory."""
        return Manifest(self.root_dir, self.utterances[:n], self.inventory)


def build_inventory(utterances: Sequence[Utterance]) -> tuple[str, ...]:
    return tuple(sorted({s for u in utterances for s in u.transcript}))


# ---------------------------------------------------------------- WAV


def encode_wav(waveform: Waveform) -> bytes:
    pcm = np.clip(np.round(waveform.samples * 32768.0), -32768, 32767).astype("<i2")
    data = pcm.tobytes()
    sr = waveform.sample_rate_hz
    fmt = struct.pack("<HHIIHH", 1, 1, sr, sr * 2, 2, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(data)) + data
    return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(path, waveform: Waveform) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(encode_wav(waveform))
    except OSError as exc:
        raise IoError(path, exc.strerror or str(exc)) from exc


def parse_wav(buf: bytes) -> Waveform:
    if len(buf) < 12 or buf[:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise NotWav("missing RIFF/WAVE header")
    pos = 12
    fmt = None
    while pos + 8 <= len(buf):
        cid = buf[pos : pos + 4]
        (size,) = struct.unpack_from("<I", buf, pos + 4)
        start = pos + 8
        if cid == b"fmt ":
            if size < 16 or start + 16 > len(buf):
                raise Truncated("fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", buf, start)
        elif cid == b"data":
            if fmt is None:
                raise UnsupportedFormat("data chunk before fmt chunk")
            tag, channels, sr, _, _, bits = fmt
            if tag != 1 or bits != 16:
                raise UnsupportedFormat(f"format tag {tag}, {bits} bits; only PCM16 supported")
            if channels != 1:
                raise UnsupportedFormat(f"{channels} channels; only mono supported")
            if start + size > len(buf):
                raise Truncated(f"data chunk declares {size} bytes, {len(buf) - start} present")
            if size < 2:
                raise Truncated("empty data chunk")
            pcm = np.frombuffer(buf, dtype="<i2", count=size // 2, offset=start)
            return Waveform(pcm.astype(np.float64) / 32768.0, sr)
        pos = start + size + (size & 1)
    if fmt is None:
        raise UnsupportedFormat("no fmt chunk")
    raise Truncated("no data chunk")


def decode_wav(path) -> Waveform:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IoError(path, exc.strerror or str(exc)) from exc
    return parse_wav(buf)


# ---------------------------------------------------------------- manifests


def parse_manifest(text: str, root_dir) -> Manifest:
    utts = []
    seen = set()
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(lineno, f"expected 3 tab-separated fields, got {len(parts)}")
        uid, audio, trans = parts
        if not uid or not audio:
            raise ParseError(lineno, "empty id or audio path")
        if uid in seen:
            raise DuplicateId(f"line {lineno}: duplicate id {uid!r}")
        seen.add(uid)
        symbols = tuple(trans.split())
        if not symbols:
            raise EmptyTranscript(f"line {lineno}: utterance {uid!r} has an empty transcript")
        if BLANK in symbols:
            raise ParseError(lineno, f"reserved symbol {BLANK!r} in transcript")
        utts.append(Utterance(uid, audio, symbols))
    return Manifest(Path(root_dir), tuple(utts), build_inventory(utts))


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(path, exc.strerror or str(exc)) from exc
    return parse_manifest(text, path.parent)


def format_manifest(manifest: Manifest) -> str:
    return "".join(
        f"{u.id}\t{u.audio_path}\t{' '.join(u.transcript)}\n" for u in manifest.utterances
    )


def write_manifest(path, manifest: Manifest) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(format_manifest(manifest))
    except OSError as exc:
        raise IoError(path, exc.strerror or str(exc)) from exc


# ---------------------------------------------------------------- synthetic corpora


@dataclass(frozen=True)
class SynthSpec:
    n_phones: int = 3
    n_utterances: int = 200
    phones_per_utt: tuple[int, int] = (3, 6)
    phone_dur_ms: tuple[int, int] = (40, 120)
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE
    noise_std: float = 0.02
    n_speakers: int = 4
    seed: int = 42

    def __post_init__(self):
        problems = []
        if self.n_phones < 2:
            problems.append("n_phones must be >= 2")
        if self.n_utterances < 1:
            problems.append("n_utterances must be >= 1")
        if self.n_speakers < 1:
            problems.append("n_speakers must be >= 1")
        for name in ("phones_per_utt", "phone_dur_ms"):
            lo, hi = getattr(self, name)
            if lo < 1 or lo > hi:
                problems.append(f"{name} must satisfy 1 <= min <= max")
        if self.noise_std < 0:
            problems.append("noise_std must be >= 0")
        if self.sample_rate_hz <= 0:
            problems.append("sample_rate_hz must be positive")
        if problems:
            raise ValueError("; ".join(problems))


TONE_BASE_HZ = 300.0
TONE_AMPLITUDE = 0.5


def phone_symbol(i: int) -> str:
    return f"p{i}"


def phone_frequency(i: int, detune: float = 1.0) -> float:
    return TONE_BASE_HZ * (i + 1) * detune


@dataclass(frozen=True)
class SynthSegment:
    utt_id: str
    phone: int
    start: int
    stop: int
    frequency_hz: float


def _render(spec: SynthSpec):
    """Yield (utt_id, speaker, waveform, segments) in corpus order."""
    rng = np.random.default_rng(spec.seed)
    detunes = rng.uniform(0.95, 1.05, size=spec.n_speakers)
    sr = spec.sample_rate_hz
    for i in range(spec.n_utterances):
        spk = int(rng.integers(spec.n_speakers))
        n = int(rng.integers(spec.phones_per_utt[0], spec.phones_per_utt[1] + 1))
        # consecutive phones always differ, so every boundary is audible
        steps = rng.integers(1, spec.n_phones, size=n - 1)
        phones = np.cumsum(np.concatenate([[rng.integers(spec.n_phones)], steps])) % spec.n_phones
        durs = rng.integers(spec.phone_dur_ms[0], spec.phone_dur_ms[1] + 1, size=n)
        uid = f"spk{spk}_utt{i:04d}"
        pieces, segs, pos = [], [], 0
        for ph, d in zip(phones, durs):
            m = max(1, int(round(d * sr / 1000.0)))
            f = phone_frequency(int(ph), float(detunes[spk]))
            pieces.append(TONE_AMPLITUDE * np.sin(2.0 * np.pi * f * np.arange(m) / sr))
            segs.append(SynthSegment(uid, int(ph), pos, pos + m, f))
            pos += m
        x = np.concatenate(pieces)
        if spec.noise_std > 0:
            x = x + rng.normal(0.0, spec.noise_std, size=x.size)
        x = np.clip(x, -1.0, 1.0)
        yield uid, spk, Waveform(x, sr), segs


def speaker_detunes(spec: SynthSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    return rng.uniform(0.95, 1.05, size=spec.n_speakers)


def synth_segments(spec: SynthSpec) -> list[SynthSegment]:
    """Ground-truth phone segmentation of the corpus ``synth_corpus`` writes."""
    return [s for _, _, _, segs in _render(spec) for s in segs]


def synth_corpus(spec: SynthSpec, out_dir, manifest_name: str = "all.tsv") -> Manifest:
    out = Path(out_dir)
    try:
        (out / "wav").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(out, exc.strerror or str(exc)) from exc
    if not os.access(out, os.W_OK):
        raise IoError(out, "directory not writable")
    utts = []
    for uid, _, wav, segs in _render(spec):
        rel = f"wav/{uid}.wav"
        write_wav(out / rel, wav)
        utts.append(Utterance(uid, rel, tuple(phone_symbol(s.phone) for s in segs)))
    manifest = Manifest(out, tuple(utts), build_inventory(utts))
    write_manifest(out / manifest_name, manifest)
    return manifest


# ---------------------------------------------------------------- splits


def split_sizes(n: int, train_frac: float, dev_frac: float) -> tuple[int, int, int]:
    n_train = int(np.floor(n * train_frac))
    n_dev = int(np.floor(n * dev_frac))
    return n_train, n_dev, n - n_train - n_dev


def split(manifest: Manifest, train_frac: float, dev_frac: float, seed: int):
    if not (train_frac > 0 and dev_frac > 0 and train_frac + dev_frac < 1):
        raise ValueError("need 0 < train_frac, dev_frac and train_frac + dev_frac < 1")
    n = len(manifest.utterances)
    sizes = split_sizes(n, train_frac, dev_frac)
    for name, size in zip(("train", "dev", "test"), sizes):
        if size == 0:
            raise EmptySplit(f"{name} split is empty ({n} utterances, fracs {train_frac}, {dev_frac})")
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum((0,) + sizes)
    parts = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        keep = np.sort(order[lo:hi])
        utts = tuple(manifest.utterances[i] for i in keep)
        parts.append(Manifest(manifest.root_dir, utts, manifest.inventory))
    return tuple(parts)
