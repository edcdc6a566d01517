"""Joint training loop with truncated backpropagation through time.

Each train step consumes one batch; the decoder is unrolled in segments
of ``tbptt_segment_steps``. Hidden/attention state and the teacher-forced
previous frame are carried across segment boundaries as values while the
gradient graph is cut; every segment runs forward -> dual-L1 loss ->
backward -> global-norm clip -> Adam.

All stochasticity for step k of epoch e derives from SeedSequence
entropy (seed, e, k), so a resumed run replays the interrupted schedule
bit for bit.
"""

import hashlib
import json
import struct
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import data as data_mod
from . import dsp as dsp_mod
from . import model as model_mod
from . import nn
from . import optim
from . import tensor as T
from .errors import ConfigError, IntegrityError, NumericError

CHECKPOINT_MAGIC = b"MTTSCKPT"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}
_DTYPE_BY_CODE = {0: "<f4", 1: "<f8", 2: "<i8"}


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_threshold: float = 1.0
    tbptt_segment_steps: int = 40
    max_steps: int = 2000
    checkpoint_interval: int = 500
    seed: int = 42
    conditioning_mode: str = "embedder"

    def __post_init__(self):
        positive = ("batch_size", "learning_rate", "beta1", "beta2", "adam_eps",
                    "clip_threshold", "tbptt_segment_steps", "max_steps", "checkpoint_interval")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.conditioning_mode not in model_mod.CONDITIONING_MODES:
            raise ConfigError(f"unknown conditioning_mode '{self.conditioning_mode}'")


# -- checkpoint container -----------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: model_mod.ModelConfig
    dsp_config: dsp_mod.DspConfig
    vocabulary: data_mod.Vocabulary
    stats: dsp_mod.FeatureStats
    speakers: list
    params: dict
    adam: optim.AdamState
    global_step: int = 0
    rng_state: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)

    @property
    def config_hash(self):
        doc = json.dumps({
            "model": self.model_config.to_dict(),
            "dsp": asdict(self.dsp_config),
            "vocab": self.vocabulary.symbols,
            "speakers": self.speakers,
        }, sort_keys=True)
        return hashlib.sha256(doc.encode()).hexdigest()

    def save(self, path):
        meta = json.dumps({
            "model_config": self.model_config.to_dict(),
            "dsp_config": asdict(self.dsp_config),
            "vocabulary": self.vocabulary.symbols,
            "stats": self.stats.to_dict(),
            "speakers": self.speakers,
            "global_step": self.global_step,
            "rng_state": self.rng_state,
            "train_config": self.train_config,
            "adam_step_count": self.adam.step_count,
            "config_hash": self.config_hash,
        }, sort_keys=True).encode("utf-8")

        tensors = []
        for name in sorted(self.params):
            p = self.params[name]
            tensors.append((f"param/{name}", p.data, p.requires_grad))
        for name in sorted(self.adam.first_moment):
            tensors.append((f"adam_m/{name}", self.adam.first_moment[name], False))
            tensors.append((f"adam_v/{name}", self.adam.second_moment[name], False))

        blob = bytearray()
        blob += CHECKPOINT_MAGIC
        blob += struct.pack("<I", CHECKPOINT_VERSION)
        blob += struct.pack("<Q", len(meta))
        blob += meta
        blob += struct.pack("<I", len(tensors))
        for name, arr, trainable_flag in tensors:
            encoded = name.encode("utf-8")
            code = _DTYPE_CODES[arr.dtype]
            blob += struct.pack("<H", len(encoded))
            blob += encoded
            blob += struct.pack("<BBB", code, 1 if trainable_flag else 0, arr.ndim)
            for dim in arr.shape:
                blob += struct.pack("<I", dim)
            blob += np.ascontiguousarray(arr).astype(_DTYPE_BY_CODE[code], copy=False).tobytes()
        blob += hashlib.sha256(bytes(blob)).digest()
        with open(path, "wb") as fh:
            fh.write(bytes(blob))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < len(CHECKPOINT_MAGIC) + 4 + 32:
            raise IntegrityError(f"checkpoint '{path}' truncated")
        if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise IntegrityError(f"'{path}' is not a checkpoint file")
        body, digest = blob[:-32], blob[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise IntegrityError(f"checkpoint '{path}' failed its checksum (corrupt or truncated)")
        offset = len(CHECKPOINT_MAGIC)
        (version,) = struct.unpack_from("<I", body, offset)
        offset += 4
        if version > CHECKPOINT_VERSION:
            raise IntegrityError(
                f"checkpoint format version {version} is newer than supported {CHECKPOINT_VERSION}")
        (meta_len,) = struct.unpack_from("<Q", body, offset)
        offset += 8
        meta = json.loads(body[offset: offset + meta_len].decode("utf-8"))
        offset += meta_len
        (n_tensors,) = struct.unpack_from("<I", body, offset)
        offset += 4

        params = {}
        adam_m = {}
        adam_v = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack_from("<H", body, offset)
            offset += 2
            name = body[offset: offset + name_len].decode("utf-8")
            offset += name_len
            code, trainable_flag, ndim = struct.unpack_from("<BBB", body, offset)
            offset += 3
            shape = struct.unpack_from(f"<{ndim}I", body, offset) if ndim else ()
            offset += 4 * ndim
            dtype = np.dtype(_DTYPE_BY_CODE[code])
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            arr = np.frombuffer(body, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
            offset += count * dtype.itemsize
            if name.startswith("param/"):
                params[name[len("param/"):]] = T.Tensor(arr, requires_grad=bool(trainable_flag))
            elif name.startswith("adam_m/"):
                adam_m[name[len("adam_m/"):]] = arr
            elif name.startswith("adam_v/"):
                adam_v[name[len("adam_v/"):]] = arr

        adam = optim.AdamState(step_count=meta["adam_step_count"],
                               first_moment=adam_m, second_moment=adam_v)
        ckpt = cls(
            model_config=model_mod.ModelConfig.from_dict(meta["model_config"]),
            dsp_config=dsp_mod.DspConfig(**meta["dsp_config"]),
            vocabulary=data_mod.Vocabulary(meta["vocabulary"]),
            stats=dsp_mod.FeatureStats.from_dict(meta["stats"]),
            speakers=meta["speakers"],
            params=params,
            adam=adam,
            global_step=meta["global_step"],
            rng_state=meta["rng_state"],
            train_config=meta.get("train_config", {}),
        )
        if meta.get("config_hash") and meta["config_hash"] != ckpt.config_hash:
            raise IntegrityError(f"checkpoint '{path}' config hash mismatch")
        return ckpt


def save_checkpoint(ckpt, path):
    ckpt.save(path)
    return path


def load_checkpoint(path):
    return Checkpoint.load(path)


# -- deterministic scheduling --------------------------------------------------------

def _epoch_rng(seed, epoch):
    return np.random.default_rng(np.random.SeedSequence([seed, 1009, epoch]))


def step_rng(seed, epoch, step_in_epoch):
    """All stochasticity of one train step (reference draws, dropout)."""
    return np.random.default_rng(np.random.SeedSequence([seed, 7919, epoch, step_in_epoch]))


def trainable_utterances(corpus, train_cfg, warn=None):
    """Utterances usable this run: lookup mode trains on the full corpus,
    embedder mode on the train split minus utterances with no eligible
    reference window."""
    if train_cfg.conditioning_mode == "lookup":
        return list(corpus.manifest.utterances)
    utts = corpus.manifest.train_utterances()
    usable = []
    for u in utts:
        windows = corpus.pool.windows_by_speaker.get(u.speaker_id, [])
        if any(u.utterance_id not in w.covered_utterances for w in windows):
            usable.append(u)
        elif warn:
            warn(f"utterance '{u.utterance_id}' has no eligible reference window; skipped")
    return usable


def epoch_batch_ids(utterances, train_cfg, epoch):
    """Deterministic batch composition (lists of utterance indices)."""
    order = _epoch_rng(train_cfg.seed, epoch).permutation(len(utterances))
    chunks = [order[i: i + train_cfg.batch_size].tolist()
              for i in range(0, len(order), train_cfg.batch_size)]
    return [c for c in chunks if len(c) >= 2]


def build_step_batch(corpus, utterances, ids, train_cfg, model_cfg, rng):
    chosen = [utterances[i] for i in ids]
    speaker_index = {s: i for i, s in enumerate(sorted(corpus.manifest.speakers))}
    return data_mod.make_batch(
        chosen, corpus.features, corpus.vocab, corpus.stats, speaker_index,
        r=model_cfg.frames_per_step, pool=corpus.pool, rng=rng,
        conditioning=train_cfg.conditioning_mode)


# -- one optimization step -------------------------------------------------------------

@dataclass
class StepResult:
    loss: float
    loss_mel: float
    loss_linear: float
    grad_norm: float
    n_segments: int
    alignments: np.ndarray  # B x steps x N


def train_step(batch, params, adam_state, model_cfg, train_cfg, rng):
    """One batch through the segmented decoder; returns sequence-level means."""
    mode = nn.Mode(train=True, rng=rng)
    r = model_cfg.frames_per_step
    steps_total = batch.mel.shape[1] // r
    seg_len = train_cfg.tbptt_segment_steps
    trainables = nn.trainable(params)
    state = model_mod.init_decoder_state(model_cfg, batch.size)

    totals = np.zeros(3)
    weight_sum = 0.0
    norms = []
    aligns = []
    seg_index = 0
    try:
        for seg_start in range(0, steps_total, seg_len):
            seg_stop = min(seg_start + seg_len, steps_total)
            f0, f1 = seg_start * r, seg_stop * r
            seg_mask = batch.frame_mask[:, f0:f1]
            valid = float(seg_mask.sum())
            if valid == 0.0:
                break
            if train_cfg.conditioning_mode == "embedder":
                speaker = model_mod.embed_speaker(params, model_cfg, batch.refs,
                                                  batch.ref_lengths, mode)
            else:
                speaker = model_mod.lookup_embedding(params, batch.speaker_indices)
            memory = model_mod.encode_text(params, model_cfg, batch.char_ids,
                                           batch.char_mask, mode)
            mel_pred, seg_aligns, state, _ = model_mod.decode(
                params, model_cfg, memory, batch.char_mask, speaker,
                batch.mel[:, f0:f1], mode, state=state)
            linear_pred = model_mod.postprocess(params, model_cfg, mel_pred, mode,
                                                frame_mask=seg_mask)
            loss, l_mel, l_lin = model_mod.dual_l1_loss(
                mel_pred, batch.mel[:, f0:f1], linear_pred, batch.linear[:, f0:f1], seg_mask)
            grads = T.gradients(loss, trainables)
            norms.append(optim.global_norm(grads))
            clipped = optim.clip_global_norm(grads, train_cfg.clip_threshold)
            optim.adam_step(trainables, clipped, adam_state,
                            lr=train_cfg.learning_rate, beta1=train_cfg.beta1,
                            beta2=train_cfg.beta2, eps=train_cfg.adam_eps)
            state = state.detach()
            totals += valid * np.array([loss.item(), l_mel.item(), l_lin.item()])
            weight_sum += valid
            aligns.append(seg_aligns)
            seg_index += 1
    except NumericError as exc:
        raise NumericError(
            f"{exc} [segment {seg_index}, grad norms so far: "
            f"{[round(n, 4) for n in norms]}]") from exc

    mean = totals / max(weight_sum, 1.0)
    return StepResult(
        loss=float(mean[0]),
        loss_mel=float(mean[1]),
        loss_linear=float(mean[2]),
        grad_norm=float(np.mean(norms)) if norms else 0.0,
        n_segments=seg_index,
        alignments=np.concatenate(aligns, axis=1) if aligns else np.zeros((batch.size, 0, 0)),
    )


# -- the fit loop -----------------------------------------------------------------------

def fit(corpus, model_cfg, train_cfg, resume=None, log_fn=None, warn=None):
    """Epoch loop over shuffled train utterances; yields a Checkpoint every
    ``checkpoint_interval`` steps and once more at the end."""
    if train_cfg.conditioning_mode != model_cfg.conditioning_mode:
        raise ConfigError(
            f"train config mode '{train_cfg.conditioning_mode}' != model config "
            f"mode '{model_cfg.conditioning_mode}'")
    utterances = trainable_utterances(corpus, train_cfg, warn=warn)
    if not utterances:
        raise ConfigError("no trainable utterances (empty train split?)")

    speakers = sorted(corpus.manifest.speakers)
    if resume is not None:
        if resume.config_hash != _fresh_checkpoint(corpus, model_cfg, train_cfg, {}, 0).config_hash:
            raise ConfigError("resume checkpoint does not match the current model/corpus config")
        params = resume.params
        adam = resume.adam
        epoch = resume.rng_state.get("epoch", 0)
        step_in_epoch = resume.rng_state.get("step_in_epoch", 0)
        global_step = resume.global_step
    else:
        params = model_mod.build_parameters(model_cfg, seed=train_cfg.seed)
        adam = optim.AdamState.for_params(nn.trainable(params))
        epoch = 0
        step_in_epoch = 0
        global_step = 0

    start = time.monotonic()
    yielded_at = global_step
    while global_step < train_cfg.max_steps:
        batches = epoch_batch_ids(utterances, train_cfg, epoch)
        if not batches:
            raise ConfigError(f"batch size {train_cfg.batch_size} yields no batches of size >= 2")
        while step_in_epoch < len(batches) and global_step < train_cfg.max_steps:
            rng = step_rng(train_cfg.seed, epoch, step_in_epoch)
            batch = build_step_batch(corpus, utterances, batches[step_in_epoch],
                                     train_cfg, model_cfg, rng)
            result = train_step(batch, params, adam, model_cfg, train_cfg, rng)
            global_step += 1
            step_in_epoch += 1
            if log_fn:
                log_fn(global_step, time.monotonic() - start, result)
            if global_step % train_cfg.checkpoint_interval == 0:
                yielded_at = global_step
                yield _fresh_checkpoint(corpus, model_cfg, train_cfg, params, global_step,
                                        adam=adam, epoch=epoch, step_in_epoch=step_in_epoch)
        if step_in_epoch >= len(batches):
            epoch += 1
            step_in_epoch = 0
    if global_step != yielded_at or global_step == 0:
        yield _fresh_checkpoint(corpus, model_cfg, train_cfg, params, global_step,
                                adam=adam, epoch=epoch, step_in_epoch=step_in_epoch)


def _fresh_checkpoint(corpus, model_cfg, train_cfg, params, global_step,
                      adam=None, epoch=0, step_in_epoch=0):
    return Checkpoint(
        model_config=model_cfg,
        dsp_config=corpus.dsp_config,
        vocabulary=corpus.vocab,
        stats=corpus.stats,
        speakers=sorted(corpus.manifest.speakers),
        params=params,
        adam=adam if adam is not None else optim.AdamState(),
        global_step=global_step,
        rng_state={"seed": train_cfg.seed, "epoch": epoch, "step_in_epoch": step_in_epoch},
        train_config=asdict(train_cfg),
    )
