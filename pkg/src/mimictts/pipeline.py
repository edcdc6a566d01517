"""Feature preprocessing and corpus loading.

``preprocess`` turns a raw manifest plus audio into a self-contained
feature directory: trimmed audio, mel/linear spectrogram containers, the
reference window pool, normalization stats, and the vocabulary. Items are
keyed by a content hash of the source audio and the relevant settings, so
re-runs skip everything that is already up to date.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import dsp as dsp_mod
from .errors import ConfigError, InputError, MimicError

_INDEX_NAME = "features_index.json"
_POOL_INDEX = "pool_index.json"


@dataclass
class PreprocessResult:
    computed: int = 0
    cached: int = 0
    failed: list = field(default_factory=list)  # (utterance_id, reason)
    pool_rebuilt: bool = False
    out_dir: Path | None = None

    @property
    def failure_fraction(self):
        total = self.computed + self.cached + len(self.failed)
        return len(self.failed) / total if total else 0.0


def _settings_digest(cfg):
    doc = json.dumps({
        "dsp": dataclasses.asdict(cfg.dsp),
        "vad": dataclasses.asdict(cfg.vad),
    }, sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()


def _content_hash(audio_path, settings_digest):
    digest = hashlib.sha256()
    digest.update(settings_digest.encode())
    digest.update(Path(audio_path).read_bytes())
    return digest.hexdigest()


def preprocess(manifest_path, out_dir, cfg, warn=None):
    """Trim, extract features, build the sample pool, write stats/vocab.

    Per-utterance failures (unreadable audio, no speech) are recorded and
    skipped; the caller decides whether the failure fraction is fatal.
    """
    out_dir = Path(out_dir)
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    (out_dir / "trimmed").mkdir(exist_ok=True)
    (out_dir / "pool").mkdir(exist_ok=True)

    manifest = data_mod.load_manifest(manifest_path)
    manifest = data_mod.split_speakers(manifest, cfg.data.held_out_list())

    index_path = out_dir / _INDEX_NAME
    index = json.loads(index_path.read_text()) if index_path.exists() else {}
    settings_digest = _settings_digest(cfg)

    result = PreprocessResult(out_dir=out_dir)
    kept = []
    for utt in manifest.utterances:
        audio_path = base / utt.audio_path
        try:
            content = _content_hash(audio_path, settings_digest)
        except OSError as exc:
            result.failed.append((utt.utterance_id, f"unreadable audio: {exc}"))
            if warn:
                warn(f"skipping '{utt.utterance_id}': unreadable audio ({exc})")
            continue
        entry = index.get(utt.utterance_id)
        paths = {
            "mel": f"features/{utt.utterance_id}.mel.spec",
            "linear": f"features/{utt.utterance_id}.linear.spec",
            "trimmed": f"trimmed/{utt.utterance_id}.wav",
        }
        if entry and entry.get("hash") == content and all((out_dir / p).exists() for p in paths.values()):
            utt.duration_s = entry["duration_s"]
            kept.append(utt)
            result.cached += 1
            continue
        try:
            wave = dsp_mod.load_audio(audio_path, cfg.dsp.sample_rate)
            trimmed = dsp_mod.trim_silence(wave, cfg.vad)
            frames = dsp_mod.stft(trimmed, cfg.dsp, pad_end=True)
            mel = dsp_mod.mel_spectrogram(frames, cfg.dsp)
            linear = dsp_mod.linear_spectrogram(frames, cfg.dsp)
        except MimicError as exc:
            result.failed.append((utt.utterance_id, str(exc)))
            if warn:
                warn(f"skipping '{utt.utterance_id}': {exc}")
            continue
        dsp_mod.save_spectrogram(out_dir / paths["mel"], mel)
        dsp_mod.save_spectrogram(out_dir / paths["linear"], linear)
        dsp_mod.save_audio(out_dir / paths["trimmed"], trimmed)
        utt.duration_s = trimmed.duration_s
        index[utt.utterance_id] = {"hash": content, "duration_s": trimmed.duration_s, **paths}
        kept.append(utt)
        result.computed += 1

    if not kept:
        raise InputError("no utterance survived preprocessing")

    index_path.write_text(json.dumps(index, indent=1, sort_keys=True))

    # corpus-level artifacts: pool, stats, vocabulary, processed manifest
    usable = data_mod.CorpusManifest(kept, dict(manifest.split))
    pool_digest = hashlib.sha256(json.dumps(
        [index[u.utterance_id]["hash"] for u in kept]
        + [str(cfg.data.window_s), str(cfg.data.overlap), str(cfg.data.min_window_fraction)]
    ).encode()).hexdigest()

    pool_index_path = out_dir / _POOL_INDEX
    old_pool = json.loads(pool_index_path.read_text()) if pool_index_path.exists() else None
    if not old_pool or old_pool.get("digest") != pool_digest:
        pool = data_mod.build_sample_pool(
            kept,
            lambda u: dsp_mod.load_audio(out_dir / f"trimmed/{u.utterance_id}.wav", cfg.dsp.sample_rate),
            cfg.dsp, window_s=cfg.data.window_s, overlap=cfg.data.overlap,
            min_fraction=cfg.data.min_window_fraction, warn=warn)
        windows_meta = []
        for i, w in enumerate(pool.windows()):
            rel = f"pool/win{i:05d}.spec"
            dsp_mod.save_spectrogram(out_dir / rel, dsp_mod.Spectrogram(
                w.mel, "log-mel", cfg.dsp.frame_shift_s, cfg.dsp.frame_length_s))
            windows_meta.append({
                "speaker_id": w.speaker_id,
                "path": rel,
                "covered_utterances": sorted(w.covered_utterances),
                "start_s": w.start_s,
                "duration_s": w.duration_s,
            })
        pool_index_path.write_text(json.dumps({
            "digest": pool_digest,
            "window_s": cfg.data.window_s,
            "overlap": cfg.data.overlap,
            "windows": windows_meta,
        }, indent=1, sort_keys=True))
        result.pool_rebuilt = True

    mels = []
    linears = []
    for u in kept:
        mels.append(dsp_mod.load_spectrogram(out_dir / index[u.utterance_id]["mel"]))
        linears.append(dsp_mod.load_spectrogram(out_dir / index[u.utterance_id]["linear"]))
    stats = dsp_mod.FeatureStats.from_spectrograms(mels, linears)
    (out_dir / "stats.json").write_text(json.dumps(stats.to_dict(), indent=1, sort_keys=True))

    vocab = data_mod.Vocabulary.from_manifest(usable)
    (out_dir / "vocab.json").write_text(json.dumps(vocab.symbols, sort_keys=True))

    (out_dir / "corpus.json").write_text(json.dumps({
        "dsp_config": dataclasses.asdict(cfg.dsp),
        "split": usable.split,
        "utterances": [dataclasses.asdict(u) for u in usable.utterances],
        "skipped": [{"utterance_id": uid, "reason": reason} for uid, reason in result.failed],
    }, indent=1, sort_keys=True))
    return result


@dataclass
class PreprocessedCorpus:
    manifest: data_mod.CorpusManifest
    features: dict           # utterance_id -> (mel Spectrogram, linear Spectrogram)
    pool: data_mod.SamplePool
    stats: dsp_mod.FeatureStats
    vocab: data_mod.Vocabulary
    dsp_config: dsp_mod.DspConfig
    out_dir: Path | None = None


def load_corpus(features_dir):
    """Load everything ``preprocess`` wrote back into memory."""
    out_dir = Path(features_dir)
    corpus_doc = out_dir / "corpus.json"
    if not corpus_doc.exists():
        raise ConfigError(f"'{out_dir}' is not a preprocessed feature directory (no corpus.json)")
    doc = json.loads(corpus_doc.read_text())
    utterances = [data_mod.Utterance(**u) for u in doc["utterances"]]
    manifest = data_mod.CorpusManifest(utterances, doc["split"])
    dsp_config = dsp_mod.DspConfig(**doc["dsp_config"])

    index = json.loads((out_dir / _INDEX_NAME).read_text())
    features = {}
    for u in utterances:
        entry = index[u.utterance_id]
        features[u.utterance_id] = (
            dsp_mod.load_spectrogram(out_dir / entry["mel"]),
            dsp_mod.load_spectrogram(out_dir / entry["linear"]),
        )

    pool_doc = json.loads((out_dir / _POOL_INDEX).read_text())
    pool = data_mod.SamplePool(window_s=pool_doc["window_s"], overlap=pool_doc["overlap"])
    for w in pool_doc["windows"]:
        spec = dsp_mod.load_spectrogram(out_dir / w["path"])
        pool.windows_by_speaker.setdefault(w["speaker_id"], []).append(data_mod.PoolWindow(
            speaker_id=w["speaker_id"],
            mel=spec.frames,
            covered_utterances=frozenset(w["covered_utterances"]),
            start_s=w["start_s"],
            duration_s=w["duration_s"],
        ))

    stats = dsp_mod.FeatureStats.from_dict(json.loads((out_dir / "stats.json").read_text()))
    vocab = data_mod.Vocabulary(json.loads((out_dir / "vocab.json").read_text()))
    return PreprocessedCorpus(manifest, features, pool, stats, vocab, dsp_config, out_dir)
