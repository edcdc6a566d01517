"""Voice-imitating TTS network and its multi-speaker baseline.

Two conditioning modes share one sequence-to-sequence backbone: "embedder"
predicts the speaker embedding from a log-mel reference sample with a
strided conv stack + max-over-time pooling; "lookup" reads a learned
per-speaker table row. The embedding is concatenated to both decoder RNN
inputs at every step. Training minimizes the sum of the mel and linear
spectrogram L1 terms over valid frames.
"""

from dataclasses import dataclass, field, asdict

import numpy as np

from . import data as data_mod
from . import dsp as dsp_mod
from . import nn
from . import tensor as T
from .errors import ConfigError, ContractError, DataError, InputError, UsageError

CONDITIONING_MODES = ("embedder", "lookup")


@dataclass
class ModelConfig:
    vocab_size: int
    n_speakers: int = 0
    conditioning_mode: str = "embedder"
    char_embed_dim: int = 128
    prenet_dim: int = 128
    encoder_dim: int = 128
    attention_dim: int = 128
    decoder_dim: int = 128
    embedding_dim: int = 128
    frames_per_step: int = 5  # spectrogram frames emitted per decoder step
    n_mels: int = 80
    n_linear_bins: int = 513
    max_decoder_steps: int = 200
    dropout: float = 0.5
    embedder_channels: int = 128
    embedder_kernel: int = 3
    embedder_strides: tuple = (1, 1, 2, 2, 2)
    embedder_dense_units: int = 128
    embedder_dense_layers: int = 2
    postnet_channels: int = 128
    postnet_kernel: int = 5
    postnet_layers: int = 2
    stop_threshold: float = 0.05
    stop_patience: int = 3
    dtype: str = "float32"

    def __post_init__(self):
        if self.conditioning_mode not in CONDITIONING_MODES:
            raise ConfigError(f"conditioning_mode must be one of {CONDITIONING_MODES}, "
                              f"got '{self.conditioning_mode}'")
        if self.frames_per_step < 1:
            raise ConfigError(f"frames_per_step must be >= 1, got {self.frames_per_step}")
        if self.encoder_dim % 2:
            raise ConfigError("encoder_dim must be even (bidirectional recurrence)")
        if self.conditioning_mode == "lookup" and self.n_speakers < 1:
            raise ConfigError("lookup conditioning requires n_speakers >= 1")
        self.embedder_strides = tuple(self.embedder_strides)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def total_stride(self):
        return int(np.prod(self.embedder_strides))

    def to_dict(self):
        d = asdict(self)
        d["embedder_strides"] = list(self.embedder_strides)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["embedder_strides"] = tuple(d.get("embedder_strides", (1, 1, 2, 2, 2)))
        return cls(**d)


def build_parameters(cfg, seed=0):
    """Initialize the full parameter registry for the configured mode."""
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    params = {}

    if cfg.conditioning_mode == "embedder":
        c = cfg.embedder_channels
        for i, _stride in enumerate(cfg.embedder_strides):
            nn.init_conv1d(params, f"embedder/conv{i}", cfg.embedder_kernel,
                           cfg.n_mels if i == 0 else c, c, rng, dt)
            nn.init_batch_norm(params, f"embedder/bn_conv{i}", c, dt)
        units = cfg.embedder_dense_units
        for j in range(cfg.embedder_dense_layers):
            nn.init_dense(params, f"embedder/dense{j}", c if j == 0 else units, units, rng, dt)
            nn.init_batch_norm(params, f"embedder/bn_dense{j}", units, dt)
        nn.init_dense(params, "embedder/proj", units, cfg.embedding_dim, rng, dt)
    else:
        params["lookup/table"] = T.Tensor(
            nn.glorot_uniform(rng, (cfg.n_speakers, cfg.embedding_dim),
                              cfg.n_speakers, cfg.embedding_dim, dt),
            requires_grad=True)

    params["encoder/embed"] = T.Tensor(
        nn.glorot_uniform(rng, (cfg.vocab_size, cfg.char_embed_dim),
                          cfg.vocab_size, cfg.char_embed_dim, dt),
        requires_grad=True)
    nn.init_dense(params, "encoder/prenet", cfg.char_embed_dim, cfg.prenet_dim, rng, dt)
    half = cfg.encoder_dim // 2
    nn.init_gru(params, "encoder/gru_fwd", cfg.prenet_dim, half, rng, dt)
    nn.init_gru(params, "encoder/gru_bwd", cfg.prenet_dim, half, rng, dt)

    nn.init_attention(params, "attention", cfg.decoder_dim, cfg.encoder_dim,
                      cfg.attention_dim, rng, dt)
    nn.init_dense(params, "decoder/prenet", cfg.n_mels, cfg.prenet_dim, rng, dt)
    nn.init_gru(params, "decoder/attn_gru",
                cfg.prenet_dim + cfg.encoder_dim + cfg.embedding_dim, cfg.decoder_dim, rng, dt)
    nn.init_gru(params, "decoder/dec_gru",
                cfg.decoder_dim + cfg.encoder_dim + cfg.embedding_dim, cfg.decoder_dim, rng, dt)
    nn.init_dense(params, "decoder/proj", cfg.decoder_dim,
                  cfg.n_mels * cfg.frames_per_step, rng, dt)

    pc = cfg.postnet_channels
    for i in range(cfg.postnet_layers):
        nn.init_conv1d(params, f"postnet/conv{i}", cfg.postnet_kernel,
                       cfg.n_mels if i == 0 else pc, pc, rng, dt)
        nn.init_batch_norm(params, f"postnet/bn{i}", pc, dt)
    nn.init_dense(params, "postnet/out", pc, cfg.n_linear_bins, rng, dt)
    return params


# -- speaker embedding ---------------------------------------------------------

def embedder_prepool(params, cfg, refs, lengths, mode):
    """Strided conv stack over a padded batch of references.

    refs: (B, T, n_mels) Tensor or array; lengths: valid frames per item.
    Returns the pre-pool feature tensor (B, T', C) and per-item valid
    frame counts, where every layer maps frames -> ceil(frames / stride).
    """
    x = refs if isinstance(refs, T.Tensor) else T.Tensor(np.asarray(refs, dtype=cfg.np_dtype))
    lens = np.asarray(lengths, dtype=np.int64)
    for i, stride in enumerate(cfg.embedder_strides):
        x = nn.conv1d_p(params, f"embedder/conv{i}", x, stride=stride)
        lens = -(-lens // stride)
        mask = (np.arange(x.shape[1])[None, :] < lens[:, None]).astype(cfg.np_dtype)
        x = nn.batch_norm_p(params, f"embedder/bn_conv{i}", x, mode, mask=mask)
        x = T.relu(x)
        x = nn.dropout(x, cfg.dropout, mode)
    return x, lens


def embed_speaker(params, cfg, refs, lengths, mode, counters=None):
    """One forward pass of the speaker embedder: conv stack, max-over-time
    pooling, two dense layers, then a linear projection (no nonlinearity,
    no dropout). Output dimension is independent of the input length."""
    lens = np.asarray(lengths, dtype=np.int64)
    if np.any(lens < cfg.total_stride):
        raise InputError(
            f"reference too short: need >= {cfg.total_stride} log-mel frames, got {lens.min()}")
    if counters is not None:
        counters["embedder_forward"] = counters.get("embedder_forward", 0) + 1
    x, lens = embedder_prepool(params, cfg, refs, lens, mode)
    mask = (np.arange(x.shape[1])[None, :] < lens[:, None]).astype(cfg.np_dtype)
    x = nn.max_over_time(x, mask=mask)
    for j in range(cfg.embedder_dense_layers):
        x = nn.dense_p(params, f"embedder/dense{j}", x)
        x = nn.batch_norm_p(params, f"embedder/bn_dense{j}", x, mode)
        x = T.relu(x)
        x = nn.dropout(x, cfg.dropout, mode)
    return nn.dense_p(params, "embedder/proj", x)


def lookup_embedding(params, speaker_indices):
    """Rows of the learned speaker table (baseline conditioning)."""
    table = params["lookup/table"]
    idx = np.asarray(speaker_indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError(f"speaker index out of range 0..{table.shape[0] - 1}: {idx}")
    return T.gather_rows(table, idx)


# -- text encoder -----------------------------------------------------------------

def encode_text(params, cfg, char_ids, char_mask, mode):
    """Character embedding -> pre-net -> bidirectional recurrence.

    Returns one encoding per input character: (B, N, encoder_dim).
    """
    ids = np.asarray(char_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.shape[1] == 0:
        raise InputError("empty character sequence")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ContractError(f"character id out of range 0..{cfg.vocab_size - 1}")
    b, n = ids.shape
    mask = np.ones((b, n), dtype=cfg.np_dtype) if char_mask is None \
        else np.asarray(char_mask, dtype=cfg.np_dtype)

    embedded = T.reshape(T.gather_rows(params["encoder/embed"], ids.reshape(-1)),
                         (b, n, cfg.char_embed_dim))
    pre = nn.dropout(T.relu(nn.dense_p(params, "encoder/prenet", embedded)), cfg.dropout, mode)

    half = cfg.encoder_dim // 2
    zeros = T.Tensor(np.zeros((b, half), dtype=cfg.np_dtype))

    def run(direction, order):
        h = zeros
        states = [None] * n
        for t in order:
            x_t = pre[:, t, :]
            h_new = nn.gru_cell(x_t, h, params, f"encoder/gru_{direction}")
            m = T.Tensor(mask[:, t: t + 1])
            h = m * h_new + (1.0 - m) * h
            states[t] = h
        return states

    fwd = run("fwd", range(n))
    bwd = run("bwd", range(n - 1, -1, -1))
    per_step = [T.reshape(T.concat([f, w], axis=-1), (b, 1, cfg.encoder_dim))
                for f, w in zip(fwd, bwd)]
    return T.concat(per_step, axis=1)


# -- decoder ------------------------------------------------------------------------

@dataclass
class DecoderState:
    h_att: T.Tensor
    h_dec: T.Tensor
    context: T.Tensor
    prev_frame: T.Tensor

    def detach(self):
        return DecoderState(self.h_att.detach(), self.h_dec.detach(),
                            self.context.detach(), self.prev_frame.detach())


def init_decoder_state(cfg, batch_size):
    dt = cfg.np_dtype
    return DecoderState(
        h_att=T.Tensor(np.zeros((batch_size, cfg.decoder_dim), dtype=dt)),
        h_dec=T.Tensor(np.zeros((batch_size, cfg.decoder_dim), dtype=dt)),
        context=T.Tensor(np.zeros((batch_size, cfg.encoder_dim), dtype=dt)),
        prev_frame=T.Tensor(np.zeros((batch_size, cfg.n_mels), dtype=dt)),
    )


def _decoder_step(params, cfg, state, memory, processed_memory, char_mask, speaker, mode):
    pre = nn.dropout(T.relu(nn.dense_p(params, "decoder/prenet", state.prev_frame)),
                     cfg.dropout, mode)
    attn_in = T.concat([pre, state.context, speaker], axis=-1)
    h_att = nn.gru_cell(attn_in, state.h_att, params, "decoder/attn_gru")
    context, weights = nn.attention(params, "attention", h_att, memory,
                                    processed_memory=processed_memory, mask=char_mask)
    dec_in = T.concat([h_att, context, speaker], axis=-1)
    h_dec = nn.gru_cell(dec_in, state.h_dec, params, "decoder/dec_gru")
    group = T.sigmoid(nn.dense_p(params, "decoder/proj", h_dec))
    group = T.reshape(group, (memory.shape[0], cfg.frames_per_step, cfg.n_mels))
    return group, weights, DecoderState(h_att, h_dec, context, state.prev_frame)


def decode(params, cfg, memory, char_mask, speaker, targets, mode, state=None):
    """Autoregressive spectrogram decoding, r frames per step.

    With ``targets`` (teacher forcing) the step count is fixed by the
    target length, which must be a multiple of r; the input to each step
    is the ground-truth last frame of the previous group. Without targets
    the decoder feeds back its own last generated frame and stops after
    ``stop_patience`` consecutive steps whose mean falls below
    ``stop_threshold``, or flags truncation at ``max_decoder_steps``.

    Returns (mel (B, steps*r, n_mels) tensor, alignments (B, steps, N)
    array, final state, truncated flag).
    """
    b = memory.shape[0]
    if state is None:
        state = init_decoder_state(cfg, b)
    processed = nn.process_memory(params, "attention", memory)
    r = cfg.frames_per_step

    groups = []
    alignments = []
    truncated = False
    if targets is not None:
        targets = np.asarray(targets, dtype=cfg.np_dtype)
        if targets.shape[1] % r:
            raise ContractError(f"target frame count {targets.shape[1]} not divisible by r={r}")
        steps = targets.shape[1] // r
        for t in range(steps):
            group, weights, state = _decoder_step(params, cfg, state, memory, processed,
                                                  char_mask, speaker, mode)
            groups.append(group)
            alignments.append(weights.data)
            state.prev_frame = T.Tensor(targets[:, (t + 1) * r - 1, :])
    else:
        below_streak = np.zeros(b, dtype=np.int64)
        for _ in range(cfg.max_decoder_steps):
            group, weights, state = _decoder_step(params, cfg, state, memory, processed,
                                                  char_mask, speaker, mode)
            groups.append(group)
            alignments.append(weights.data)
            state.prev_frame = group[:, -1, :]
            below = group.data.mean(axis=(1, 2)) < cfg.stop_threshold
            below_streak = np.where(below, below_streak + 1, 0)
            if np.all(below_streak >= cfg.stop_patience):
                break
        else:
            truncated = True

    mel = T.concat(groups, axis=1)
    return mel, np.stack(alignments, axis=1), state, truncated


def postprocess(params, cfg, mel, mode, frame_mask=None):
    """Whole-sequence (non-causal) mapping from mel to log-linear frames."""
    x = mel if isinstance(mel, T.Tensor) else T.Tensor(np.asarray(mel, dtype=cfg.np_dtype))
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    if x.shape[1] < 1:
        raise ContractError("postprocess needs at least one frame")
    mask = frame_mask
    for i in range(cfg.postnet_layers):
        x = nn.conv1d_p(params, f"postnet/conv{i}", x, stride=1)
        x = nn.batch_norm_p(params, f"postnet/bn{i}", x, mode, mask=mask)
        x = T.relu(x)
    out = T.sigmoid(nn.dense_p(params, "postnet/out", x))
    return T.reshape(out, out.shape[1:]) if squeeze else out


# -- objective -------------------------------------------------------------------------

def dual_l1_loss(mel_pred, mel_target, linear_pred, linear_target, frame_mask):
    """Sum of the two spectrogram L1 terms, each mean-reduced over valid
    elements; equal weights."""
    mask = np.asarray(frame_mask)
    valid = float(mask.sum())
    if valid == 0:
        raise ContractError("loss over an entirely masked batch")
    mel_target = T.as_tensor(mel_target)
    linear_target = T.as_tensor(linear_target)
    if mel_pred.shape != mel_target.shape or linear_pred.shape != linear_target.shape:
        raise ContractError(
            f"prediction/target shapes differ: {mel_pred.shape} vs {mel_target.shape}, "
            f"{linear_pred.shape} vs {linear_target.shape}")
    m3 = np.expand_dims(mask, -1)
    mel_mask = T.Tensor(np.broadcast_to(m3, mel_pred.shape).astype(mel_pred.dtype))
    lin_mask = T.Tensor(np.broadcast_to(m3, linear_pred.shape).astype(linear_pred.dtype))
    mel_term = T.sum_(T.abs_(mel_pred - mel_target) * mel_mask) / (valid * mel_pred.shape[-1])
    lin_term = T.sum_(T.abs_(linear_pred - linear_target) * lin_mask) / (valid * linear_pred.shape[-1])
    return mel_term + lin_term, mel_term, lin_term


# -- synthesis ----------------------------------------------------------------------------

@dataclass
class SynthesisResult:
    waveform: dsp_mod.Waveform
    mel: np.ndarray          # normalized, frames x n_mels
    linear: np.ndarray       # normalized, frames x n_linear_bins
    alignment: np.ndarray    # steps x N
    truncated: bool
    embedder_forward_count: int
    reference_frames: int | None = None


def reference_mel_from_waveform(wave, dsp_cfg, stats, min_duration_s=1.0):
    """Trim a reference sample and produce the normalized log-mel input."""
    trimmed = dsp_mod.trim_silence(wave)
    if trimmed.duration_s < min_duration_s:
        raise InputError(
            f"reference too short after trimming: {trimmed.duration_s:.2f}s < {min_duration_s}s")
    mel = dsp_mod.mel_spectrogram(dsp_mod.stft(trimmed, dsp_cfg, pad_end=True), dsp_cfg)
    return stats.normalize(mel.frames, "log-mel")


def synthesize(ckpt, text, reference_wave=None, speaker_index=None,
               griffin_lim_iters=None, griffin_lim_power=None, seed=None):
    """Full text-to-waveform pipeline on a loaded checkpoint.

    Embedder checkpoints take a reference waveform (no transcript needed,
    exactly one embedder forward pass); lookup checkpoints take a trained
    speaker index. Never updates parameters.
    """
    cfg = ckpt.model_config
    dsp_cfg = ckpt.dsp_config
    if cfg.conditioning_mode == "embedder":
        if reference_wave is None or speaker_index is not None:
            raise UsageError("embedder checkpoints require a reference sample, not a speaker index")
    else:
        if speaker_index is None or reference_wave is not None:
            raise UsageError("lookup checkpoints require a speaker index, not a reference sample")

    normalized = data_mod.normalize_text(text)
    char_ids = ckpt.vocabulary.encode(normalized)[None, :]
    mode = nn.Mode(train=False)
    counters = {"embedder_forward": 0}

    with T.no_grad():
        if cfg.conditioning_mode == "embedder":
            ref = reference_mel_from_waveform(reference_wave, dsp_cfg, ckpt.stats)
            speaker = embed_speaker(ckpt.params, cfg, ref[None, :, :].astype(cfg.np_dtype),
                                    [ref.shape[0]], mode, counters)
            ref_frames = ref.shape[0]
        else:
            speaker = lookup_embedding(ckpt.params, [speaker_index])
            ref_frames = None

        memory = encode_text(ckpt.params, cfg, char_ids, None, mode)
        mel, alignments, _state, truncated = decode(ckpt.params, cfg, memory, None,
                                                    speaker, None, mode)
        linear = postprocess(ckpt.params, cfg, mel, mode)

    linear_norm = linear.data[0]
    log_linear = ckpt.stats.denormalize(linear_norm, "log-linear")
    magnitudes = np.exp(log_linear)
    power = dsp_cfg.griffin_lim_power if griffin_lim_power is None else griffin_lim_power
    wave = dsp_mod.griffin_lim(magnitudes**power, dsp_cfg, n_iters=griffin_lim_iters,
                               init="zero", seed=seed)
    peak = np.max(np.abs(wave.samples))
    if peak > 1.0:
        wave = dsp_mod.Waveform(wave.samples / peak, wave.sample_rate)

    return SynthesisResult(
        waveform=wave,
        mel=mel.data[0],
        linear=linear_norm,
        alignment=alignments[0],
        truncated=truncated,
        embedder_forward_count=counters["embedder_forward"],
        reference_frames=ref_frames,
    )


def parameter_checksum(params):
    """Order-independent digest of all parameter bytes, for purity checks."""
    import hashlib

    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(params[name].data).tobytes())
    return digest.hexdigest()
