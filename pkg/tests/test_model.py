import numpy as np
import pytest

from mimictts import data, dsp, fixture, model, nn, optim
from mimictts import tensor as T
from mimictts.errors import ConfigError, ContractError, InputError, UsageError
from mimictts.train import Checkpoint

F64 = "float64"


def fd_config(mode="embedder", dtype=F64):
    return model.ModelConfig(
        vocab_size=7, n_speakers=3, conditioning_mode=mode,
        char_embed_dim=5, prenet_dim=4, encoder_dim=6, attention_dim=5,
        decoder_dim=6, embedding_dim=4, frames_per_step=5,
        n_mels=4, n_linear_bins=6, max_decoder_steps=10,
        embedder_channels=3, embedder_dense_units=4, embedder_dense_layers=2,
        postnet_channels=3, postnet_kernel=3, postnet_layers=2, dtype=dtype)


def synth_config(mode="embedder"):
    return model.ModelConfig(
        vocab_size=10, n_speakers=4, conditioning_mode=mode,
        char_embed_dim=8, prenet_dim=8, encoder_dim=8, attention_dim=8,
        decoder_dim=8, embedding_dim=8, frames_per_step=5,
        n_mels=80, n_linear_bins=513, max_decoder_steps=8,
        embedder_channels=8, embedder_dense_units=8,
        postnet_channels=8, dtype="float32")


def infer():
    return nn.Mode(train=False)


def train_mode(seed=0):
    return nn.Mode(train=True, rng=np.random.default_rng(seed))


# -- speaker embedder ---------------------------------------------------------------

def test_embedder_output_dim_independent_of_length():
    cfg = fd_config()
    params = model.build_parameters(cfg, seed=1)
    rng = np.random.default_rng(2)
    dims = set()
    for t in (8, 20, 60, 100, 480):
        refs = rng.random((1, t, cfg.n_mels))
        out = model.embed_speaker(params, cfg, refs, [t], infer())
        dims.add(out.shape)
    assert dims == {(1, cfg.embedding_dim)}


def test_embedder_prepool_stride_arithmetic():
    cfg = fd_config()
    params = model.build_parameters(cfg, seed=1)
    rng = np.random.default_rng(3)
    for t in (8, 13, 64, 100, 481):
        refs = rng.random((1, t, cfg.n_mels))
        pooled, lens = model.embedder_prepool(params, cfg, refs, [t], infer())
        assert lens[0] == -(-t // 8), t
        assert pooled.shape[1] >= lens[0]


def test_embedder_six_second_reference_is_480_frames():
    cfg = dsp.DspConfig()
    wave = fixture.utterance_audio("BED KODA", 150.0)
    six = dsp.Waveform(np.tile(wave.samples, 5)[: 6 * 16000], 16000)
    mel = dsp.mel_spectrogram(dsp.stft(six, cfg, pad_end=True), cfg)
    assert mel.frames.shape[0] == 480
    mcfg = synth_config()
    params = model.build_parameters(mcfg, seed=0)
    pooled, lens = model.embedder_prepool(params, mcfg, mel.frames[None, :, :], [480], infer())
    assert lens[0] == 60  # ceil(480 / 8)


def test_embedder_too_short_reference_rejected():
    cfg = fd_config()
    params = model.build_parameters(cfg, seed=1)
    with pytest.raises(InputError):
        model.embed_speaker(params, cfg, np.zeros((1, 4, cfg.n_mels)), [4], infer())


def test_embedder_inference_deterministic():
    cfg = fd_config()
    params = model.build_parameters(cfg, seed=1)
    refs = np.random.default_rng(5).random((2, 30, cfg.n_mels))
    a = model.embed_speaker(params, cfg, refs, [30, 25], infer()).data
    b = model.embed_speaker(params, cfg, refs, [30, 25], infer()).data
    np.testing.assert_array_equal(a, b)


def test_embedder_counter_increments():
    cfg = fd_config()
    params = model.build_parameters(cfg, seed=1)
    counters = {}
    refs = np.random.default_rng(6).random((1, 16, cfg.n_mels))
    model.embed_speaker(params, cfg, refs, [16], infer(), counters)
    model.embed_speaker(params, cfg, refs, [16], infer(), counters)
    assert counters["embedder_forward"] == 2


# -- lookup table ----------------------------------------------------------------------

def test_lookup_returns_table_rows():
    cfg = fd_config(mode="lookup")
    params = model.build_parameters(cfg, seed=2)
    out = model.lookup_embedding(params, [0, 2])
    np.testing.assert_array_equal(out.data[0], params["lookup/table"].data[0])
    np.testing.assert_array_equal(out.data[1], params["lookup/table"].data[2])


def test_lookup_table_row_count_matches_speakers():
    cfg = model.ModelConfig(vocab_size=5, n_speakers=109, conditioning_mode="lookup",
                            encoder_dim=4, n_mels=4, n_linear_bins=6)
    params = model.build_parameters(cfg, seed=0)
    assert params["lookup/table"].shape == (109, cfg.embedding_dim)


def test_lookup_out_of_range_rejected():
    cfg = fd_config(mode="lookup")
    params = model.build_parameters(cfg, seed=2)
    with pytest.raises(ContractError):
        model.lookup_embedding(params, [3])


# -- text encoder ------------------------------------------------------------------------

def test_encode_text_one_vector_per_character():
    cfg = fd_config()
    params = model.build_parameters(cfg, seed=3)
    ids = np.arange(7)[None, :].repeat(2, axis=0) % cfg.vocab_size
    memory = model.encode_text(params, cfg, ids[:, :7], None, infer())
    assert memory.shape == (2, 7, cfg.encoder_dim)
    single = model.encode_text(params, cfg, np.array([[3]]), None, infer())
    assert single.shape == (1, 1, cfg.encoder_dim)


def test_encode_text_rejects_bad_input():
    cfg = fd_config()
    params = model.build_parameters(cfg, seed=3)
    with pytest.raises(InputError):
        model.encode_text(params, cfg, np.zeros((1, 0), dtype=np.int64), None, infer())
    with pytest.raises(ContractError):
        model.encode_text(params, cfg, np.array([[cfg.vocab_size]]), None, infer())


# -- decoder ----------------------------------------------------------------------------

def setup_decode(cfg, b=2, n=4, seed=4):
    params = model.build_parameters(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    memory = model.encode_text(params, cfg, rng.integers(0, cfg.vocab_size, (b, n)), None, infer())
    speaker = T.Tensor(rng.random((b, cfg.embedding_dim)).astype(cfg.np_dtype))
    return params, memory, speaker, rng


def test_decode_teacher_forcing_step_count():
    cfg = fd_config()
    params, memory, speaker, rng = setup_decode(cfg)
    targets = rng.random((2, 25, cfg.n_mels))
    mel, aligns, _, truncated = model.decode(params, cfg, memory, None, speaker,
                                             targets, infer())
    assert mel.shape == (2, 25, cfg.n_mels)
    assert aligns.shape == (2, 5, 4)  # 25 / r=5 steps
    assert not truncated


def test_decode_rejects_nonmultiple_targets():
    cfg = fd_config()
    params, memory, speaker, rng = setup_decode(cfg)
    with pytest.raises(ContractError):
        model.decode(params, cfg, memory, None, speaker, rng.random((2, 23, cfg.n_mels)), infer())


def test_decode_alignment_rows_sum_to_one():
    cfg = fd_config()
    params, memory, speaker, rng = setup_decode(cfg, n=6)
    targets = rng.random((2, 20, cfg.n_mels))
    _, aligns, _, _ = model.decode(params, cfg, memory, None, speaker, targets, infer())
    np.testing.assert_allclose(aligns.sum(axis=2), 1.0, atol=1e-6)


def test_decode_inference_emits_multiples_of_r():
    cfg = fd_config()
    params, memory, speaker, _ = setup_decode(cfg)
    mel, aligns, _, truncated = model.decode(params, cfg, memory, None, speaker, None, infer())
    assert mel.shape[1] % cfg.frames_per_step == 0
    assert mel.shape[1] // cfg.frames_per_step == aligns.shape[1]
    assert truncated  # untrained outputs sit near 0.5, never below the stop threshold


def test_decode_different_embeddings_differ():
    cfg = fd_config()
    params, memory, _, rng = setup_decode(cfg)
    s1 = T.Tensor(np.zeros((2, cfg.embedding_dim)))
    s2 = T.Tensor(np.ones((2, cfg.embedding_dim)))
    m1, _, _, _ = model.decode(params, cfg, memory, None, s1, None, infer())
    m2, _, _, _ = model.decode(params, cfg, memory, None, s2, None, infer())
    assert not np.allclose(m1.data[:, :5], m2.data[:, :5])


# -- post-processor ------------------------------------------------------------------------

def test_postprocess_shapes():
    cfg = fd_config()
    params = model.build_parameters(cfg, seed=5)
    rng = np.random.default_rng(6)
    out = model.postprocess(params, cfg, rng.random((2, 25, cfg.n_mels)), infer())
    assert out.shape == (2, 25, cfg.n_linear_bins)
    single = model.postprocess(params, cfg, rng.random((1, cfg.n_mels)), infer())
    assert single.shape == (1, cfg.n_linear_bins)


def test_postprocess_grads_come_only_from_linear_term():
    cfg = fd_config()
    params = model.build_parameters(cfg, seed=7)
    rng = np.random.default_rng(8)
    mel_pred = T.Tensor(rng.random((1, 10, cfg.n_mels)), requires_grad=False)
    mel_pred.requires_grad = True
    lin_pred = model.postprocess(params, cfg, mel_pred, train_mode(1),
                                 frame_mask=np.ones((1, 10)))
    mask = np.ones((1, 10))
    postnet_keys = {k for k in params if k.startswith("postnet/") and params[k].requires_grad}

    # mel-only objective: no gradient reaches the post-processor
    mel_term = T.sum_(T.abs_(mel_pred - T.Tensor(rng.random((1, 10, cfg.n_mels)))))
    grads = T.gradients(mel_term, nn.trainable(params))
    assert all(np.all(grads[k].data == 0) for k in postnet_keys)

    # linear term drives every post-processor parameter
    lin_pred2 = model.postprocess(params, cfg, mel_pred, train_mode(1),
                                  frame_mask=mask)
    _, _, lin_term = model.dual_l1_loss(
        T.Tensor(mel_pred.data), T.Tensor(mel_pred.data),
        lin_pred2, T.Tensor(rng.random((1, 10, cfg.n_linear_bins))), mask)
    grads = T.gradients(lin_term, nn.trainable(params))
    assert any(np.any(grads[k].data != 0) for k in postnet_keys)


# -- loss ---------------------------------------------------------------------------------

def test_loss_zero_for_identical():
    rng = np.random.default_rng(9)
    mel = T.Tensor(rng.random((2, 10, 4)))
    lin = T.Tensor(rng.random((2, 10, 6)))
    mask = np.ones((2, 10))
    total, _, _ = model.dual_l1_loss(mel, T.Tensor(mel.data.copy()),
                                     lin, T.Tensor(lin.data.copy()), mask)
    assert total.item() == 0.0


def test_loss_constant_offset_hand_value():
    rng = np.random.default_rng(10)
    mel = rng.random((2, 10, 4))
    lin = rng.random((2, 10, 6))
    mask = np.ones((2, 10))
    total, l_mel, l_lin = model.dual_l1_loss(
        T.Tensor(mel), T.Tensor(mel.copy()),
        T.Tensor(lin + 0.5), T.Tensor(lin), mask)
    assert l_mel.item() == 0.0
    assert total.item() == pytest.approx(0.5, abs=1e-12)


def test_loss_respects_mask():
    mel_pred = np.zeros((1, 10, 4))
    mel_tgt = np.ones((1, 10, 4))
    lin = np.zeros((1, 10, 6))
    mask = np.concatenate([np.ones((1, 5)), np.zeros((1, 5))], axis=1)
    total, l_mel, _ = model.dual_l1_loss(T.Tensor(mel_pred), T.Tensor(mel_tgt),
                                         T.Tensor(lin), T.Tensor(lin), mask)
    assert l_mel.item() == pytest.approx(1.0)  # masked mean counts only valid frames


def test_loss_scales_linearly():
    rng = np.random.default_rng(11)
    mel_t = rng.random((2, 10, 4))
    lin_t = rng.random((2, 10, 6))
    d_mel = rng.random((2, 10, 4))
    d_lin = rng.random((2, 10, 6))
    mask = np.ones((2, 10))
    base, bm, bl = model.dual_l1_loss(T.Tensor(mel_t + d_mel), T.Tensor(mel_t),
                                      T.Tensor(lin_t + d_lin), T.Tensor(lin_t), mask)
    alpha = 3.0
    scaled, sm, sl = model.dual_l1_loss(T.Tensor(mel_t + alpha * d_mel), T.Tensor(mel_t),
                                        T.Tensor(lin_t + alpha * d_lin), T.Tensor(lin_t), mask)
    assert sm.item() == pytest.approx(alpha * bm.item(), rel=1e-12)
    assert sl.item() == pytest.approx(alpha * bl.item(), rel=1e-12)


def test_loss_all_masked_rejected():
    with pytest.raises(ContractError):
        model.dual_l1_loss(T.Tensor(np.zeros((1, 5, 4))), T.Tensor(np.zeros((1, 5, 4))),
                           T.Tensor(np.zeros((1, 5, 6))), T.Tensor(np.zeros((1, 5, 6))),
                           np.zeros((1, 5)))


# -- end-to-end differentiability ------------------------------------------------------------

def full_loss(params, cfg, batch_arrays, mode_seed=33):
    char_ids, char_mask, refs, ref_lens, mel_t, lin_t, mask = batch_arrays
    mode = nn.Mode(train=True, rng=np.random.default_rng(mode_seed))
    speaker = model.embed_speaker(params, cfg, refs, ref_lens, mode)
    memory = model.encode_text(params, cfg, char_ids, char_mask, mode)
    mel_pred, _, _, _ = model.decode(params, cfg, memory, char_mask, speaker, mel_t, mode)
    lin_pred = model.postprocess(params, cfg, mel_pred, mode, frame_mask=mask)
    total, _, _ = model.dual_l1_loss(mel_pred, mel_t, lin_pred, lin_t, mask)
    return total


def make_batch_arrays(cfg, b=2, n=4, m=10, t_ref=20, seed=12):
    rng = np.random.default_rng(seed)
    char_ids = rng.integers(0, cfg.vocab_size, (b, n))
    char_mask = np.ones((b, n))
    refs = rng.random((b, t_ref, cfg.n_mels))
    mel_t = rng.random((b, m, cfg.n_mels))
    lin_t = rng.random((b, m, cfg.n_linear_bins))
    mask = np.ones((b, m))
    mask[1, -5:] = 0.0
    return char_ids, char_mask, refs, np.array([t_ref, t_ref - 4]), mel_t, lin_t, mask


def test_gradient_flows_into_embedder_convs():
    cfg = fd_config()
    params = model.build_parameters(cfg, seed=13)
    arrays = make_batch_arrays(cfg)
    loss = full_loss(params, cfg, arrays)
    grads = T.gradients(loss, nn.trainable(params))
    conv_grads = [np.abs(grads[k].data).sum() for k in grads if k.startswith("embedder/conv")]
    assert all(g > 0 for g in conv_grads)


def test_full_loss_gradients_match_finite_differences():
    cfg = fd_config()
    params = model.build_parameters(cfg, seed=14)
    arrays = make_batch_arrays(cfg)
    loss = full_loss(params, cfg, arrays)
    grads = T.gradients(loss, nn.trainable(params))
    probe_keys = ["embedder/conv0/w", "embedder/bn_dense0/gamma", "encoder/embed",
                  "encoder/gru_fwd/u_zr", "attention/score/w", "decoder/attn_gru/w_h",
                  "decoder/proj/w", "postnet/conv0/w", "postnet/out/b"]
    h = 1e-5
    rng = np.random.default_rng(15)
    for key in probe_keys:
        p = params[key]
        flat = p.data.reshape(-1)
        coords = rng.choice(flat.size, size=min(4, flat.size), replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = full_loss(params, cfg, arrays).item()
            flat[i] = orig - h
            down = full_loss(params, cfg, arrays).item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            got = grads[key].data.reshape(-1)[i]
            denom = max(abs(numeric), abs(got), 1e-7)
            assert abs(got - numeric) / denom < 1e-4, (key, i, got, numeric)


# -- synthesize -------------------------------------------------------------------------------

def make_checkpoint(mode="embedder"):
    cfg = synth_config(mode)
    params = model.build_parameters(cfg, seed=16)
    vocab = data.Vocabulary([data.PAD_SYMBOL, data.EOS_SYMBOL] + sorted(" ABDEKO"))
    cfg = model.ModelConfig.from_dict({**cfg.to_dict(), "vocab_size": len(vocab)})
    params = model.build_parameters(cfg, seed=16)
    stats = dsp.FeatureStats(mel_min=np.log(1e-5), mel_max=2.0,
                             linear_min=np.log(1e-5), linear_max=3.0)
    return Checkpoint(
        model_config=cfg, dsp_config=dsp.DspConfig(), vocabulary=vocab, stats=stats,
        speakers=[f"spk{i:02d}" for i in range(4)], params=params,
        adam=optim.AdamState.for_params(nn.trainable(params)))


def reference_wave(seconds=2.0):
    wave = fixture.utterance_audio("BED KODA", 150.0)
    reps = int(np.ceil(seconds * 16000 / len(wave.samples)))
    return dsp.Waveform(np.tile(wave.samples, reps)[: int(seconds * 16000)], 16000)


def test_synthesize_embedder_mode_runs_once_and_is_pure():
    ckpt = make_checkpoint("embedder")
    before = model.parameter_checksum(ckpt.params)
    result = model.synthesize(ckpt, "BAD BED", reference_wave=reference_wave(),
                              griffin_lim_iters=2)
    assert model.parameter_checksum(ckpt.params) == before
    assert result.embedder_forward_count == 1
    assert result.mel.shape[1] == 80 and result.linear.shape[1] == 513
    assert result.waveform.sample_rate == 16000
    assert np.max(np.abs(result.waveform.samples)) <= 1.0


def test_synthesize_deterministic():
    ckpt = make_checkpoint("embedder")
    a = model.synthesize(ckpt, "BED", reference_wave=reference_wave(), griffin_lim_iters=2)
    b = model.synthesize(ckpt, "BED", reference_wave=reference_wave(), griffin_lim_iters=2)
    np.testing.assert_array_equal(a.waveform.samples, b.waveform.samples)


def test_synthesize_lookup_mode():
    ckpt = make_checkpoint("lookup")
    result = model.synthesize(ckpt, "BED", speaker_index=1, griffin_lim_iters=2)
    assert result.embedder_forward_count == 0
    assert result.waveform.samples.size > 0


def test_synthesize_mode_mismatch_rejected():
    ckpt = make_checkpoint("embedder")
    with pytest.raises(UsageError):
        model.synthesize(ckpt, "BED", speaker_index=0)
    lookup = make_checkpoint("lookup")
    with pytest.raises(UsageError):
        model.synthesize(lookup, "BED", reference_wave=reference_wave())


def test_synthesize_short_reference_rejected():
    ckpt = make_checkpoint("embedder")
    with pytest.raises(InputError):
        model.synthesize(ckpt, "BED", reference_wave=fixture.utterance_audio("K", 150.0))


def test_config_round_trip_and_validation():
    cfg = fd_config()
    again = model.ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg
    with pytest.raises(ConfigError):
        model.ModelConfig(vocab_size=5, conditioning_mode="bogus")
    with pytest.raises(ConfigError):
        model.ModelConfig(vocab_size=5, frames_per_step=0)
    with pytest.raises(ConfigError):
        model.ModelConfig(vocab_size=5, conditioning_mode="lookup", n_speakers=0)
