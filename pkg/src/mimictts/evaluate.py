"""Automated analyses: embedding PCA, a speaker-discriminability proxy
for listener identification, side-by-side spectrogram exports, and an
alignment-monotonicity diagnostic."""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp as dsp_mod
from . import model as model_mod
from . import nn
from . import tensor as T
from .errors import ConfigError, ContractError

EXPORT_ENTRIES = ("gen_mel", "gen_linear", "gt_mel", "gt_linear", "alignment", "audio", "manifest")


@dataclass
class EmbeddingSet:
    matrix: np.ndarray      # n_items x embedding_dim
    labels: list            # speaker_id per row
    genders: dict | None = None  # speaker_id -> gender tag, optional

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ContractError(f"embedding matrix must be 2-D, got {self.matrix.shape}")
        if len(self.labels) != self.matrix.shape[0]:
            raise ContractError("labels length does not match embedding rows")
        if not np.all(np.isfinite(self.matrix)):
            raise ContractError("non-finite embedding values")


@dataclass
class PcaResult:
    components: np.ndarray          # k x d, orthonormal rows
    projections: np.ndarray         # n x k
    explained_variance: np.ndarray  # k, non-increasing


def pca(embeddings, k=2):
    """Principal components via SVD of the mean-centered matrix."""
    X = embeddings.matrix if isinstance(embeddings, EmbeddingSet) else np.asarray(embeddings, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise ContractError(f"PCA needs at least 2 rows, got {n}")
    if not 1 <= k <= min(n, d):
        raise ConfigError(f"k must be in 1..min(n, d)={min(n, d)}, got {k}")
    centered = X - X.mean(axis=0)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[0] < 1e-12:
        raise ContractError("zero-variance data: PCA is degenerate")
    components = vt[:k]
    # deterministic sign: largest-magnitude coordinate of each component positive
    for i in range(k):
        j = int(np.argmax(np.abs(components[i])))
        if components[i, j] < 0:
            components[i] = -components[i]
    projections = centered @ components.T
    explained = (s[:k] ** 2) / (n - 1)
    return PcaResult(components, projections, explained)


def embed_corpus(ckpt, pool):
    """One embedding per pool window (embedder checkpoints, inference mode)
    or one table row per speaker (lookup checkpoints)."""
    cfg = ckpt.model_config
    if cfg.conditioning_mode == "lookup":
        table = ckpt.params["lookup/table"].data
        return EmbeddingSet(np.array(table, dtype=np.float64), list(ckpt.speakers))
    rows = []
    labels = []
    mode = nn.Mode(train=False)
    with T.no_grad():
        for window in pool.windows():
            mel = ckpt.stats.normalize(window.mel, "log-mel").astype(cfg.np_dtype)
            emb = model_mod.embed_speaker(ckpt.params, cfg, mel[None, :, :],
                                          [mel.shape[0]], mode)
            rows.append(emb.data[0].astype(np.float64))
            labels.append(window.speaker_id)
    return EmbeddingSet(np.stack(rows), labels)


def _distances(anchor, others, metric):
    if metric == "cosine":
        def norm(v):
            return v / max(np.linalg.norm(v), 1e-12)
        a = norm(anchor)
        return [1.0 - float(norm(o) @ a) for o in others]
    if metric == "euclidean":
        return [float(np.linalg.norm(o - anchor)) for o in others]
    raise ConfigError(f"unknown distance metric '{metric}'")


def discriminability(embeddings, trials, rng, metric="cosine"):
    """Three-sample identification proxy: anchor window, a same-speaker
    window, and a different-speaker window; predict by smaller distance
    to the anchor. Returns the fraction of correct trials."""
    by_speaker = {}
    for row, label in zip(embeddings.matrix, embeddings.labels):
        by_speaker.setdefault(label, []).append(row)
    speakers = sorted(by_speaker)
    rich = [s for s in speakers if len(by_speaker[s]) >= 2]
    if len(speakers) < 2 or not rich:
        raise ConfigError("discriminability needs >= 2 speakers and >= 2 windows for an anchor speaker")
    correct = 0
    for _ in range(trials):
        anchor_speaker = rich[int(rng.integers(len(rich)))]
        other_speaker = anchor_speaker
        while other_speaker == anchor_speaker:
            other_speaker = speakers[int(rng.integers(len(speakers)))]
        candidates = by_speaker[anchor_speaker]
        i, j = rng.choice(len(candidates), size=2, replace=False)
        anchor, same = candidates[int(i)], candidates[int(j)]
        different = by_speaker[other_speaker][int(rng.integers(len(by_speaker[other_speaker])))]
        d_same, d_diff = _distances(anchor, [same, different], metric)
        correct += int(d_same < d_diff)
    return correct / trials


def monotonic_alignment_fraction(alignment):
    """Mass of the best non-decreasing path through an attention matrix
    (steps x positions), as a fraction of total mass."""
    A = np.asarray(alignment, dtype=np.float64)
    if A.ndim != 2 or A.size == 0:
        raise ContractError(f"alignment must be a non-empty 2-D matrix, got {A.shape}")
    best = A[0].copy()
    for t in range(1, A.shape[0]):
        best = A[t] + np.maximum.accumulate(best)
    return float(best.max() / max(A.sum(), 1e-12))


def _write_grid_csv(path, grid):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(grid):
            writer.writerow([f"{v:.8e}" for v in row])


def export_comparison(ckpt, text, out_dir, reference_wave=None, speaker_index=None,
                      ground_truth=None, griffin_lim_iters=None, seed=None):
    """Write a synthesis bundle: generated mel/linear grids, ground-truth
    grids when given, the alignment matrix, reconstructed audio, and a
    manifest listing exactly what was produced."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = model_mod.synthesize(ckpt, text, reference_wave=reference_wave,
                                  speaker_index=speaker_index,
                                  griffin_lim_iters=griffin_lim_iters, seed=seed)
    entries = {}
    _write_grid_csv(out_dir / "gen_mel.csv", result.mel)
    entries["gen_mel"] = "gen_mel.csv"
    _write_grid_csv(out_dir / "gen_linear.csv", result.linear)
    entries["gen_linear"] = "gen_linear.csv"
    if ground_truth is not None:
        gt_mel, gt_linear = ground_truth
        _write_grid_csv(out_dir / "gt_mel.csv", ckpt.stats.normalize(gt_mel.frames, "log-mel"))
        entries["gt_mel"] = "gt_mel.csv"
        _write_grid_csv(out_dir / "gt_linear.csv", ckpt.stats.normalize(gt_linear.frames, "log-linear"))
        entries["gt_linear"] = "gt_linear.csv"
    _write_grid_csv(out_dir / "alignment.csv", result.alignment)
    entries["alignment"] = "alignment.csv"
    dsp_mod.save_audio(out_dir / "audio.wav", result.waveform)
    entries["audio"] = "audio.wav"
    manifest = {
        "text": text,
        "entries": entries,
        "truncated": result.truncated,
        "embedder_forward_count": result.embedder_forward_count,
        "mel_frames": int(result.mel.shape[0]),
        "linear_bins": int(result.linear.shape[1]),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    entries["manifest"] = "manifest.json"
    return {name: out_dir / rel for name, rel in entries.items()}


def write_projections_csv(path, embeddings, result):
    """CSV of PCA projections: speaker_id, gender, pc1, pc2, ..."""
    k = result.projections.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["speaker_id", "gender"] + [f"pc{i + 1}" for i in range(k)])
        for label, row in zip(embeddings.labels, result.projections):
            gender = (embeddings.genders or {}).get(label, "")
            writer.writerow([label, gender] + [f"{v:.8e}" for v in row])
    return path
