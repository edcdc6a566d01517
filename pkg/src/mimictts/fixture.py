"""Bundled synthetic fixture corpus.

Generates tiny "voices" so tests and acceptance runs need no external
download: each speaker is a harmonic tone with a distinct fundamental,
and each transcript character maps to a 150 ms segment whose harmonic
weights depend deterministically on the character. Text and audio are
therefore aligned monotonically, which a desk-scale model can learn.
"""

from pathlib import Path

import numpy as np

from . import dsp

FIXTURE_TEXTS = (
    "BED KODA",
    "DAK OBED",
    "KO DEBAK",
    "ABODE K",
    "EKO BAD",
)

CHAR_SEGMENT_S = 0.150
EDGE_SILENCE_S = 0.150
_N_HARMONICS = 8
_RAMP_S = 0.010


def speaker_pitch(index):
    """Distinct fundamentals, spaced by ~30% per speaker."""
    return 130.0 * (1.3**index)


def _char_segment(char, f0, sr):
    n = int(CHAR_SEGMENT_S * sr)
    t = np.arange(n) / sr
    if char == " ":
        x = 0.02 * np.sin(2 * np.pi * f0 * t)
    else:
        code = float(ord(char))
        x = np.zeros(n)
        for k in range(1, _N_HARMONICS + 1):
            weight = (0.55 + 0.45 * np.cos(0.7 * code + 1.9 * k)) / k
            x += weight * np.sin(2 * np.pi * f0 * k * t)
    ramp = int(_RAMP_S * sr)
    envelope = np.ones(n)
    envelope[:ramp] = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
    envelope[-ramp:] = envelope[:ramp][::-1]
    return x * envelope


def utterance_audio(text, f0, sr=16000):
    """Edge silence + one harmonic segment per character, peak-normalized."""
    silence = np.zeros(int(EDGE_SILENCE_S * sr))
    parts = [silence] + [_char_segment(c, f0, sr) for c in text] + [silence]
    x = np.concatenate(parts)
    peak = np.max(np.abs(x))
    return dsp.Waveform(0.6 * x / peak, sr)


def generate_corpus(out_dir, n_speakers=2, utterances_per_speaker=5,
                    sample_rate=16000, held_out_speakers=()):
    """Write WAV files plus a TSV manifest; returns the manifest path.

    Speakers are named spk00, spk01, ...; the scripted texts cycle when
    more than five utterances per speaker are requested. ``held_out_speakers``
    is recorded only through the returned ids (the split is applied at
    preprocess time from configuration).
    """
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in range(n_speakers):
        speaker = f"spk{s:02d}"
        f0 = speaker_pitch(s)
        (wav_dir / speaker).mkdir(exist_ok=True)
        for u in range(utterances_per_speaker):
            text = FIXTURE_TEXTS[u % len(FIXTURE_TEXTS)]
            wave = utterance_audio(text, f0, sample_rate)
            rel = Path("wav") / speaker / f"utt{u:02d}.wav"
            dsp.save_audio(out_dir / rel, wave)
            rows.append(f"{rel}\t{speaker}\t{text}")
    manifest = out_dir / "manifest.tsv"
    manifest.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return manifest
