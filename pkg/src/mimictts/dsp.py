"""Audio I/O and spectral feature extraction.

Framing defaults follow the training recipe: 50 ms Hann window, 12.5 ms
hop, FFT size = next power of two over the window. Log spectrograms are
floored before the log and min-max normalized per corpus for use as
network targets; Griffin-Lim inverts the log-linear output back to audio.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import ConfigError, ContractError, InputError, IntegrityError, ShapeError

SPECTROGRAM_KINDS = ("linear-mag", "log-linear", "log-mel")


@dataclass
class DspConfig:
    sample_rate: int = 16000
    frame_length_s: float = 0.050
    frame_shift_s: float = 0.0125
    n_fft: int = 0  # 0 = next power of two >= frame length
    n_mels: int = 80
    log_floor: float = 1e-5
    pad_end: bool = True
    griffin_lim_iters: int = 50
    griffin_lim_power: float = 1.5

    @property
    def frame_length(self):
        return int(round(self.frame_length_s * self.sample_rate))

    @property
    def hop_length(self):
        return int(round(self.frame_shift_s * self.sample_rate))

    @property
    def fft_size(self):
        if self.n_fft:
            return self.n_fft
        n = 1
        while n < self.frame_length:
            n *= 2
        return n

    @property
    def n_linear_bins(self):
        return self.fft_size // 2 + 1


@dataclass
class VadConfig:
    frame_s: float = 0.010
    abs_floor: float = 1e-3
    rel_threshold: float = 0.5
    hangover_s: float = 0.200


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ContractError("waveform contains non-finite samples")

    @property
    def duration_s(self):
        return len(self.samples) / self.sample_rate


@dataclass
class Spectrogram:
    frames: np.ndarray  # time x bins
    kind: str
    frame_shift_s: float
    frame_length_s: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2:
            raise ShapeError(f"spectrogram must be 2-D (time x bins), got {self.frames.shape}")
        if self.kind not in SPECTROGRAM_KINDS:
            raise ContractError(f"unknown spectrogram kind '{self.kind}'")
        if self.kind == "linear-mag" and self.frames.size and self.frames.min() < 0:
            raise ContractError("linear-mag spectrogram has negative values")

    @property
    def n_frames(self):
        return self.frames.shape[0]


# -- audio I/O ---------------------------------------------------------------

_PCM_SCALES = {np.dtype(np.int16): 32768.0, np.dtype(np.int32): 2147483648.0}


def load_audio(path, target_sample_rate=16000):
    """Read a PCM WAV file: mono-downmixed, [-1, 1], resampled to target rate."""
    try:
        rate, data = wavfile.read(path)
    except (ValueError, OSError) as exc:
        raise InputError(f"cannot read WAV file '{path}': {exc}") from exc
    if data.ndim == 2:
        data = data.astype(np.float64).mean(axis=1)
    if data.dtype in _PCM_SCALES:
        data = data.astype(np.float64) / _PCM_SCALES[data.dtype]
    elif data.dtype == np.uint8:
        data = (data.astype(np.float64) - 128.0) / 128.0
    else:
        data = data.astype(np.float64)
    data = np.clip(data, -1.0, 1.0)
    if rate != target_sample_rate:
        g = np.gcd(int(rate), int(target_sample_rate))
        data = resample_poly(data, target_sample_rate // g, rate // g)
        data = np.clip(data, -1.0, 1.0)
    return Waveform(data, target_sample_rate)


def save_audio(path, waveform):
    """Write 16-bit PCM WAV."""
    pcm = np.clip(waveform.samples, -1.0, 1.0)
    wavfile.write(path, waveform.sample_rate, (pcm * 32767.0).astype(np.int16))


# -- silence trimming --------------------------------------------------------

def _speech_regions(speech_flags, hangover_frames):
    """Contiguous speech runs, bridging gaps shorter than the hangover."""
    regions = []
    for i in np.flatnonzero(speech_flags):
        if regions and i - regions[-1][1] < hangover_frames:
            regions[-1][1] = i + 1
        else:
            regions.append([int(i), int(i) + 1])
    return regions


def trim_silence(waveform, vad=None):
    """Cut leading/trailing non-speech using an energy detector.

    Sub-frames of ``frame_s`` are speech iff their RMS exceeds
    max(abs_floor, rel_threshold * median RMS). Gaps shorter than the
    hangover are bridged (interior pauses survive untouched); the signal
    is then cut at the first and last speech region boundaries.
    """
    vad = vad or VadConfig()
    x = waveform.samples
    if len(x) == 0:
        raise InputError("empty waveform")
    frame = max(1, int(round(vad.frame_s * waveform.sample_rate)))
    n_frames = max(1, len(x) // frame)
    clipped = x[: n_frames * frame].reshape(n_frames, frame)
    rms = np.sqrt((clipped**2).mean(axis=1))
    threshold = max(vad.abs_floor, vad.rel_threshold * float(np.median(rms)))
    speech = rms > threshold
    if not speech.any():
        raise InputError("no speech detected (signal entirely below VAD threshold)")
    hangover = max(1, int(round(vad.hangover_s / vad.frame_s)))
    regions = _speech_regions(speech, hangover)
    start = regions[0][0] * frame
    end = len(x) if regions[-1][1] >= n_frames else regions[-1][1] * frame
    return Waveform(x[start:end].copy(), waveform.sample_rate)


# -- STFT / ISTFT -------------------------------------------------------------

def _hann(n):
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(waveform, cfg, pad_end=None):
    """Hann-windowed STFT -> complex array (frames x bins).

    Without end padding the frame count is 1 + floor((len - frame)/hop);
    with it the signal is zero-padded so that count becomes ceil(len/hop).
    """
    cfg_pad = cfg.pad_end if pad_end is None else pad_end
    x = waveform.samples
    frame, hop, n_fft = cfg.frame_length, cfg.hop_length, cfg.fft_size
    if len(x) < frame and not cfg_pad:
        raise InputError(f"input too short for STFT: {len(x)} samples < frame {frame}")
    if cfg_pad:
        n_frames = max(1, int(np.ceil(len(x) / hop)))
        needed = (n_frames - 1) * hop + frame
        x = np.pad(x, (0, max(0, needed - len(x))))
    else:
        n_frames = 1 + (len(x) - frame) // hop
    offsets = np.arange(n_frames) * hop
    segments = x[offsets[:, None] + np.arange(frame)] * _hann(frame)
    return np.fft.rfft(segments, n=n_fft, axis=1)


def istft(frames, cfg, length=None):
    """Least-squares inverse STFT (windowed overlap-add / summed window power)."""
    frame, hop, n_fft = cfg.frame_length, cfg.hop_length, cfg.fft_size
    window = _hann(frame)
    n_frames = frames.shape[0]
    total = (n_frames - 1) * hop + frame
    num = np.zeros(total)
    den = np.zeros(total)
    chunks = np.fft.irfft(frames, n=n_fft, axis=1)[:, :frame] * window
    wsq = window**2
    for k in range(n_frames):
        o = k * hop
        num[o: o + frame] += chunks[k]
        den[o: o + frame] += wsq
    out = np.where(den > 1e-10, num / np.maximum(den, 1e-10), 0.0)
    if length is not None:
        out = out[:length] if len(out) >= length else np.pad(out, (0, length - len(out)))
    return Waveform(out, cfg.sample_rate)


# -- spectrogram features ------------------------------------------------------

def mel_filterbank(cfg):
    """Triangular filters on the mel scale spanning 0 Hz to Nyquist.

    Returns (n_mels x n_linear_bins); every row has positive total weight.
    """
    if cfg.n_mels < 2:
        raise ConfigError(f"n_mels must be >= 2, got {cfg.n_mels}")

    def to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    nyquist = cfg.sample_rate / 2.0
    mel_points = np.linspace(to_mel(0.0), to_mel(nyquist), cfg.n_mels + 2)
    hz_points = from_mel(mel_points)
    bin_freqs = np.arange(cfg.n_linear_bins) * cfg.sample_rate / cfg.fft_size
    fb = np.zeros((cfg.n_mels, cfg.n_linear_bins))
    for i in range(cfg.n_mels):
        lo, center, hi = hz_points[i], hz_points[i + 1], hz_points[i + 2]
        up = (bin_freqs - lo) / max(center - lo, 1e-10)
        down = (hi - bin_freqs) / max(hi - center, 1e-10)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
        if fb[i].sum() <= 0:  # very narrow band: take the nearest bin
            fb[i, int(np.argmin(np.abs(bin_freqs - center)))] = 1.0
    return fb


def linear_spectrogram(stft_frames, cfg):
    """Log-magnitude spectrogram on the raw FFT grid."""
    mag = np.abs(stft_frames)
    return Spectrogram(np.log(np.maximum(mag, cfg.log_floor)), "log-linear",
                       cfg.frame_shift_s, cfg.frame_length_s)


def mel_spectrogram(stft_frames, cfg, filterbank=None):
    """Log mel-band spectrogram (triangular filterbank then log compression)."""
    fb = mel_filterbank(cfg) if filterbank is None else filterbank
    mag = np.abs(stft_frames)
    mel = mag @ fb.T
    return Spectrogram(np.log(np.maximum(mel, cfg.log_floor)), "log-mel",
                       cfg.frame_shift_s, cfg.frame_length_s)


def griffin_lim(magnitudes, cfg, n_iters=None, init="zero", seed=None, return_errors=False):
    """Estimate a waveform whose STFT magnitude matches ``magnitudes``.

    Alternates ISTFT/STFT projections from a zero (or seeded random) phase.
    The spectral error ||,|STFT(x_k)| - S,||_2 is non-increasing over
    iterations because the ISTFT here is the least-squares inverse.
    """
    S = magnitudes.frames if isinstance(magnitudes, Spectrogram) else np.asarray(magnitudes)
    if S.size and S.min() < 0:
        raise ContractError("Griffin-Lim requires non-negative magnitudes")
    n_iters = cfg.griffin_lim_iters if n_iters is None else n_iters
    if n_iters < 0:
        raise ContractError(f"n_iters must be >= 0, got {n_iters}")
    if init == "random":
        rng = np.random.default_rng(seed)
        phase = np.exp(2j * np.pi * rng.random(S.shape))
    else:
        phase = np.ones(S.shape, dtype=np.complex128)
    errors = []
    spec = S * phase
    wave = istft(spec, cfg)
    for _ in range(n_iters):
        rebuilt = stft(wave, cfg, pad_end=False)
        if return_errors:
            errors.append(float(np.linalg.norm(np.abs(rebuilt) - S)))
        mag = np.abs(rebuilt)
        spec = S * np.where(mag > 1e-12, rebuilt / np.maximum(mag, 1e-12), 1.0)
        wave = istft(spec, cfg)
    if return_errors:
        rebuilt = stft(wave, cfg, pad_end=False)
        errors.append(float(np.linalg.norm(np.abs(rebuilt) - S)))
        return wave, np.asarray(errors)
    return wave


# -- normalization stats -------------------------------------------------------

@dataclass
class FeatureStats:
    """Per-corpus min/max of the log features, for [0, 1] target scaling."""

    mel_min: float = 0.0
    mel_max: float = 1.0
    linear_min: float = 0.0
    linear_max: float = 1.0

    def bounds(self, kind):
        if kind == "log-mel":
            return self.mel_min, self.mel_max
        if kind == "log-linear":
            return self.linear_min, self.linear_max
        raise ContractError(f"no normalization stats for kind '{kind}'")

    def normalize(self, values, kind):
        lo, hi = self.bounds(kind)
        return np.clip((values - lo) / max(hi - lo, 1e-10), 0.0, 1.0)

    def denormalize(self, values, kind):
        lo, hi = self.bounds(kind)
        return values * (hi - lo) + lo

    def to_dict(self):
        return {"mel_min": self.mel_min, "mel_max": self.mel_max,
                "linear_min": self.linear_min, "linear_max": self.linear_max}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_spectrograms(cls, mels, linears):
        return cls(
            mel_min=float(min(s.frames.min() for s in mels)),
            mel_max=float(max(s.frames.max() for s in mels)),
            linear_min=float(min(s.frames.min() for s in linears)),
            linear_max=float(max(s.frames.max() for s in linears)),
        )


# -- binary spectrogram container ----------------------------------------------

_SPEC_MAGIC = b"SPGM"
_SPEC_VERSION = 1
_KIND_CODES = {k: i for i, k in enumerate(SPECTROGRAM_KINDS)}


def save_spectrogram(path, spec):
    """Container layout: magic, version, kind, frame timing, dims, f32 payload."""
    header = struct.pack(
        "<4sHBxddII",
        _SPEC_MAGIC,
        _SPEC_VERSION,
        _KIND_CODES[spec.kind],
        spec.frame_shift_s,
        spec.frame_length_s,
        spec.frames.shape[0],
        spec.frames.shape[1],
    )
    payload = np.ascontiguousarray(spec.frames, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_spectrogram(path):
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize("<4sHBxddII"))
        if len(header) < struct.calcsize("<4sHBxddII"):
            raise IntegrityError(f"truncated spectrogram file '{path}'")
        magic, version, kind_code, shift, length, n_frames, n_bins = struct.unpack("<4sHBxddII", header)
        if magic != _SPEC_MAGIC:
            raise IntegrityError(f"'{path}' is not a spectrogram container")
        if version > _SPEC_VERSION:
            raise IntegrityError(f"unsupported spectrogram container version {version}")
        payload = fh.read(n_frames * n_bins * 4)
        if len(payload) != n_frames * n_bins * 4:
            raise IntegrityError(f"truncated spectrogram payload in '{path}'")
        frames = np.frombuffer(payload, dtype="<f4").reshape(n_frames, n_bins)
    return Spectrogram(frames.astype(np.float64), SPECTROGRAM_KINDS[kind_code], shift, length)
