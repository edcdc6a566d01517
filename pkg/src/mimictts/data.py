"""Corpus handling: transcripts, speaker splits, reference windows, batches.

The manifest is a tab-separated file (audio_path, speaker_id, raw
transcript), one utterance per line. Reference windows for the speaker
embedder come from a per-speaker pool built by concatenating all trimmed
audio and sliding a fixed window with overlap; a window is never paired
with an utterance it covers.
"""

import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .errors import ConfigError, ContractError, DataError, InputError, SamplingError

ALLOWED_PUNCTUATION = ".,!?'\"-:;"
_ALLOWED_CHARS = frozenset(string.ascii_letters + string.digits + ALLOWED_PUNCTUATION + " ")

# canonical ten held-out speakers for VCTK-style corpora
DEFAULT_HELD_OUT_SPEAKERS = (
    "p225", "p226", "p243", "p244", "p262",
    "p263", "p302", "p303", "p360", "p361",
)

PAD_SYMBOL = "<pad>"
EOS_SYMBOL = "<eos>"


def normalize_text(raw):
    """Keep English letters (case preserved), digits, whitelisted punctuation
    and spaces; collapse whitespace runs; trim ends. Empty results are
    rejected (the utterance is unusable)."""
    kept = "".join(c if c in _ALLOWED_CHARS else " " if c.isspace() else "" for c in raw)
    collapsed = " ".join(kept.split())
    if not collapsed:
        raise DataError(f"transcript empty after normalization: {raw!r}")
    return collapsed


@dataclass
class Utterance:
    utterance_id: str
    audio_path: str
    transcript: str  # normalized
    speaker_id: str
    duration_s: float | None = None


@dataclass
class CorpusManifest:
    utterances: list
    split: dict = field(default_factory=dict)  # speaker_id -> "train" | "test"

    @property
    def speakers(self):
        return sorted({u.speaker_id for u in self.utterances})

    def train_utterances(self):
        return [u for u in self.utterances if self.split.get(u.speaker_id) == "train"]

    def test_utterances(self):
        return [u for u in self.utterances if self.split.get(u.speaker_id) == "test"]


def load_manifest(path):
    """Parse the TSV manifest, normalizing transcripts; skips blank lines."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"manifest not found: {path}")
    utterances = []
    seen = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        audio_path, speaker_id, raw = parts
        transcript = normalize_text(raw)
        stem = Path(audio_path).stem
        utt_id = f"{speaker_id}_{stem}"
        if utt_id in seen:
            raise DataError(f"{path}:{lineno}: duplicate utterance id '{utt_id}'")
        seen.add(utt_id)
        utterances.append(Utterance(utt_id, audio_path, transcript, speaker_id))
    manifest = CorpusManifest(utterances)
    manifest.split = {s: "train" for s in manifest.speakers}
    return manifest


def split_speakers(manifest, held_out_ids=None):
    """Mark held-out speakers as test. ``None`` applies the canonical default
    list when all its speakers are present, otherwise holds out nothing."""
    speakers = set(manifest.speakers)
    if held_out_ids is None:
        held_out_ids = DEFAULT_HELD_OUT_SPEAKERS if set(DEFAULT_HELD_OUT_SPEAKERS) <= speakers else ()
    held = list(held_out_ids)
    unknown = [h for h in held if h not in speakers]
    if unknown:
        raise ConfigError(f"held-out speakers not in corpus: {unknown}")
    manifest.split = {s: "test" if s in set(held) else "train" for s in speakers}
    return manifest


# -- vocabulary ------------------------------------------------------------------

@dataclass
class Vocabulary:
    """Characters observed in the manifest plus pad and end-of-sequence."""

    symbols: list

    @classmethod
    def from_manifest(cls, manifest):
        chars = sorted({c for u in manifest.utterances for c in u.transcript})
        return cls([PAD_SYMBOL, EOS_SYMBOL] + chars)

    @property
    def pad_id(self):
        return 0

    @property
    def eos_id(self):
        return 1

    def __len__(self):
        return len(self.symbols)

    def encode(self, text, add_eos=True):
        table = {s: i for i, s in enumerate(self.symbols)}
        ids = []
        for c in text:
            if c not in table:
                raise DataError(f"character {c!r} not in vocabulary")
            ids.append(table[c])
        if add_eos:
            ids.append(self.eos_id)
        return np.asarray(ids, dtype=np.int64)


# -- reference sample pool ----------------------------------------------------------

@dataclass
class PoolWindow:
    speaker_id: str
    mel: np.ndarray  # raw log-mel, frames x n_mels
    covered_utterances: frozenset
    start_s: float
    duration_s: float


@dataclass
class SamplePool:
    window_s: float
    overlap: float
    windows_by_speaker: dict = field(default_factory=dict)

    @property
    def n_windows(self):
        return sum(len(w) for w in self.windows_by_speaker.values())

    def windows(self):
        for speaker in sorted(self.windows_by_speaker):
            yield from self.windows_by_speaker[speaker]


def build_sample_pool(utterances, audio_provider, cfg, window_s=6.0, overlap=0.5,
                      min_fraction=0.5, warn=None):
    """Build per-speaker reference windows from trimmed audio.

    Concatenates each speaker's trimmed audio in the given order, slides a
    ``window_s`` window with hop ``window_s * (1 - overlap)`` and records
    which utterances each window covers. A trailing partial window is kept
    only when it extends past the last full window and is at least
    ``min_fraction`` of the window length; speakers whose total audio falls
    below that minimum are excluded with a warning.
    """
    if not 0.0 <= overlap < 1.0:
        raise ConfigError(f"overlap must be in [0, 1), got {overlap}")
    by_speaker = {}
    for utt in utterances:
        by_speaker.setdefault(utt.speaker_id, []).append(utt)

    pool = SamplePool(window_s=window_s, overlap=overlap)
    for speaker in sorted(by_speaker):
        chunks = []
        spans = []  # (utterance_id, start_sample, end_sample) in the concatenated stream
        cursor = 0
        sr = None
        for utt in by_speaker[speaker]:
            wave = audio_provider(utt)
            sr = wave.sample_rate
            chunks.append(wave.samples)
            spans.append((utt.utterance_id, cursor, cursor + len(wave.samples)))
            cursor += len(wave.samples)
        stream = np.concatenate(chunks) if chunks else np.zeros(0)
        win = int(round(window_s * sr))
        hop = max(1, int(round(win * (1.0 - overlap))))
        total = len(stream)
        if total < win * min_fraction:
            if warn:
                warn(f"speaker '{speaker}' has {total / sr:.2f}s of audio, "
                     f"below {min_fraction:.0%} of the {window_s}s window; excluded from pool")
            continue
        offsets = list(range(0, max(total - win, 0) + 1, hop))
        last_end = offsets[-1] + win if offsets else 0
        # trailing partial window, only if it adds coverage and is long enough
        if last_end < total:
            tail_start = offsets[-1] + hop if offsets else 0
            if total - tail_start >= win * min_fraction and total > last_end:
                offsets.append(tail_start)
        windows = []
        for o in offsets:
            end = min(o + win, total)
            segment = dsp.Waveform(stream[o:end], sr)
            mel = dsp.mel_spectrogram(dsp.stft(segment, cfg, pad_end=True), cfg)
            covered = frozenset(uid for uid, s, e in spans if s < end and e > o)
            windows.append(PoolWindow(speaker, mel.frames, covered, o / sr, (end - o) / sr))
        pool.windows_by_speaker[speaker] = windows
    return pool


def draw_reference(pool, speaker_id, exclude_utterance, rng):
    """Uniform draw among the speaker's windows that do not cover the
    excluded utterance."""
    windows = pool.windows_by_speaker.get(speaker_id, [])
    eligible = [w for w in windows if exclude_utterance not in w.covered_utterances]
    if not eligible:
        raise SamplingError(
            f"no reference window for speaker '{speaker_id}' avoiding utterance '{exclude_utterance}'")
    return eligible[int(rng.integers(len(eligible)))]


# -- batches -----------------------------------------------------------------------

@dataclass
class Batch:
    utterance_ids: list
    speaker_ids: list
    speaker_indices: np.ndarray  # bookkeeping; model input only in lookup mode
    char_ids: np.ndarray         # B x N int64, padded with pad_id
    char_mask: np.ndarray        # B x N float32
    mel: np.ndarray              # B x M x n_mels float32, normalized
    linear: np.ndarray           # B x M x n_linear float32, normalized
    frame_mask: np.ndarray       # B x M float32
    refs: np.ndarray | None      # B x T x n_mels float32, normalized (embedder mode)
    ref_lengths: np.ndarray | None
    ref_windows: list | None     # PoolWindow per item, for auditability

    @property
    def size(self):
        return len(self.utterance_ids)


def pad_to_multiple(n, r):
    return int(np.ceil(n / r)) * r


def make_batch(utterances, features, vocab, stats, speaker_index, r=5,
               pool=None, rng=None, conditioning="embedder"):
    """Assemble a padded training batch.

    ``features`` maps utterance_id -> (mel Spectrogram, linear Spectrogram)
    with raw log values; normalization to [0, 1] happens here. Spectrogram
    targets are padded to a common multiple of ``r`` frames with the
    silence value (normalized log floor = 0).
    """
    if not utterances:
        raise ContractError("empty batch")
    char_seqs = [vocab.encode(u.transcript) for u in utterances]
    n_max = max(len(c) for c in char_seqs)
    mels, linears = zip(*(features[u.utterance_id] for u in utterances))
    m_max = pad_to_multiple(max(m.frames.shape[0] for m in mels), r)

    b = len(utterances)
    char_ids = np.zeros((b, n_max), dtype=np.int64)
    char_mask = np.zeros((b, n_max), dtype=np.float32)
    mel = np.zeros((b, m_max, mels[0].frames.shape[1]), dtype=np.float32)
    linear = np.zeros((b, m_max, linears[0].frames.shape[1]), dtype=np.float32)
    frame_mask = np.zeros((b, m_max), dtype=np.float32)
    for i, (seq, m, l) in enumerate(zip(char_seqs, mels, linears)):
        char_ids[i, : len(seq)] = seq
        char_mask[i, : len(seq)] = 1.0
        t = m.frames.shape[0]
        mel[i, :t] = stats.normalize(m.frames, "log-mel")
        linear[i, :t] = stats.normalize(l.frames, "log-linear")
        frame_mask[i, :t] = 1.0

    refs = ref_lengths = ref_windows = None
    if conditioning == "embedder":
        if pool is None or rng is None:
            raise ContractError("embedder batches need a sample pool and rng")
        ref_windows = [draw_reference(pool, u.speaker_id, u.utterance_id, rng) for u in utterances]
        t_max = max(w.mel.shape[0] for w in ref_windows)
        refs = np.zeros((b, t_max, ref_windows[0].mel.shape[1]), dtype=np.float32)
        ref_lengths = np.zeros(b, dtype=np.int64)
        for i, w in enumerate(ref_windows):
            refs[i, : w.mel.shape[0]] = stats.normalize(w.mel, "log-mel")
            ref_lengths[i] = w.mel.shape[0]

    return Batch(
        utterance_ids=[u.utterance_id for u in utterances],
        speaker_ids=[u.speaker_id for u in utterances],
        speaker_indices=np.asarray([speaker_index[u.speaker_id] for u in utterances], dtype=np.int64),
        char_ids=char_ids,
        char_mask=char_mask,
        mel=mel,
        linear=linear,
        frame_mask=frame_mask,
        refs=refs,
        ref_lengths=ref_lengths,
        ref_windows=ref_windows,
    )
