"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with -s to watch them stream).

The quick structural criteria come first; the two training-based
reproductions at the end dominate the runtime (tens of minutes on CPU).
"""

import dataclasses
import itertools
import json
import math
import time

import numpy as np
import pytest
import torch

from ztts import pipeline
from ztts.adversary import DiscriminatorOutput, feature_matching_loss, \
    lsgan_discriminator_loss, lsgan_generator_loss
from ztts.flow_acoustic import (
    AcousticModel,
    FlowConfig,
    FlowStack,
    PriorStats,
    TextEncoderConfig,
    log_prob_matrix,
    mas_align,
)
from ztts.presets import smoke_config, tiny_config
from ztts.signal_core import Waveform, extract_pitch, load_waveform
from ztts.synthetic import make_corpus
from ztts.trainer import (
    LossWeights,
    SegmentSampler,
    WaveGANTrainer,
    stop_gradient_pitch_experiment,
    train_wavegan,
)
from ztts.wavegan import DecoderConfig, EncoderConfig, LatentPosterior, WaveGAN, kl_loss

torch.set_num_threads(2)


def report(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def perturb(module: torch.nn.Module, seed: int, scale: float = 0.02) -> None:
    g = torch.Generator().manual_seed(seed)
    for p in module.parameters():
        p.data = p.data + torch.randn(p.shape, generator=g, dtype=p.dtype) * scale


# -- 1. flow invertibility ----------------------------------------------------


def test_flow_invertibility_bulk():
    t0 = time.time()
    torch.manual_seed(0)
    flow = FlowStack(FlowConfig())  # full 256-channel stack
    perturb(flow, seed=1)
    rng = np.random.default_rng(0)
    worst = 0.0
    with torch.no_grad():
        for i in range(100):
            frames = int(rng.integers(1, 65))
            z = torch.from_numpy(rng.standard_normal((256, frames)).astype(np.float32))
            z = z.unsqueeze(0)
            c, _ = flow(z)
            back = flow.inverse(c)
            worst = max(worst, float((back[..., :frames] - z).abs().max()))
    elapsed = time.time() - t0
    report("flow invertibility", worst < 1e-4 and elapsed < 60,
           f"max round-trip error {worst:.2e} over 100 sequences in {elapsed:.1f}s")


# -- 2. log-determinant exactness ----------------------------------------------


def finite_difference_logdet(fn, x: torch.Tensor, h: float = 1e-5) -> float:
    n = x.numel()
    jac = torch.zeros(n, n, dtype=torch.float64)
    flat = x.flatten()
    with torch.no_grad():
        for i in range(n):
            up = flat.clone()
            up[i] += h
            down = flat.clone()
            down[i] -= h
            jac[:, i] = (fn(up.view(x.shape)) - fn(down.view(x.shape))) / (2 * h)
    return float(torch.linalg.slogdet(jac)[1])


def test_logdet_exactness():
    t0 = time.time()
    worst = 0.0
    for trial in range(50):
        torch.manual_seed(trial)
        if trial % 2 == 0:
            cfg = FlowConfig(channels=8, n_blocks=2, hidden_channels=8, squeeze=1)
            shape = (1, 8, 1)
        else:
            cfg = FlowConfig(channels=2, n_blocks=2, hidden_channels=8, squeeze=2)
            shape = (1, 2, 4)
        flow = FlowStack(cfg).double()
        perturb(flow, seed=trial, scale=0.1)
        x = torch.randn(shape, dtype=torch.float64)
        analytic = float(flow(x)[1])
        numeric = finite_difference_logdet(lambda v: flow(v)[0].flatten(), x)
        worst = max(worst, abs(analytic - numeric) / max(abs(numeric), 1e-6))
    elapsed = time.time() - t0
    report("log-determinant exactness", worst < 1e-3 and elapsed < 60,
           f"max relative error {worst:.2e} over 50 parameterizations in {elapsed:.1f}s")


# -- 3. alignment search vs exhaustive enumeration ------------------------------


def enumerate_best(value: np.ndarray):
    n, m = value.shape
    best_score, best_path = -np.inf, None
    for cuts in itertools.combinations(range(1, n), m - 1):
        bounds = (0,) + cuts + (n,)
        path = np.concatenate([
            np.full(bounds[i + 1] - bounds[i], i, dtype=np.int64) for i in range(m)
        ])
        score = float(value[np.arange(n), path].sum())
        if score > best_score:
            best_score, best_path = score, path
    return best_score, best_path


def test_alignment_matches_enumeration():
    t0 = time.time()
    rng = np.random.default_rng(123)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 9))
        m = int(rng.integers(1, min(n, 4) + 1))
        c = torch.from_numpy(rng.standard_normal((n, 3)))
        prior = PriorStats(torch.from_numpy(rng.standard_normal((m, 3))),
                           torch.from_numpy(rng.standard_normal((m, 3)) * 0.4))
        value = log_prob_matrix(c, prior)
        best_score, best_path = enumerate_best(value)
        a = mas_align(c, prior)
        assert np.array_equal(a.frame_to_token, best_path)
        got = float(value[np.arange(n), a.frame_to_token].sum())
        worst = max(worst, abs(got - best_score))
    elapsed = time.time() - t0
    report("alignment search optimality", worst < 1e-6 and elapsed < 60,
           f"max log-prob gap {worst:.2e} over 200 instances in {elapsed:.1f}s")


# -- 4. KL closed form ------------------------------------------------------------


def test_kl_closed_form_and_monte_carlo():
    exact = float(kl_loss(LatentPosterior(torch.zeros(1, 4, 1), torch.zeros(1, 4, 1))))
    g = torch.Generator().manual_seed(21)
    mu = torch.randn(1, 4, 1, generator=g)
    log_sigma = torch.randn(1, 4, 1, generator=g) * 0.5
    closed = float(kl_loss(LatentPosterior(mu, log_sigma)))

    eps = torch.randn(10 ** 6, 4, generator=torch.Generator().manual_seed(99),
                      dtype=torch.float64)
    mu64, ls64 = mu.double().squeeze(), log_sigma.double().squeeze()
    z = mu64 + ls64.exp() * eps
    log_q = -0.5 * (math.log(2 * math.pi) + 2 * ls64 + eps ** 2)
    log_p = -0.5 * (math.log(2 * math.pi) + z ** 2)
    mc = float((log_q - log_p).sum(dim=1).mean() / 4)
    rel = abs(closed - mc) / abs(mc)
    report("KL correctness", exact == 0.0 and rel < 0.01,
           f"kl(0,1)={exact}, closed={closed:.6f} vs monte-carlo={mc:.6f} (rel {rel:.4f})")


# -- 5. adversarial loss closed forms ----------------------------------------------


def test_adversarial_loss_closed_forms():
    def outs(score, feat=0.0):
        return [DiscriminatorOutput(torch.full((1, 1, 2, 3), score),
                                    [torch.full((1, 2, 2, 2), feat)]) for _ in range(6)]

    offset_one = outs(0.0)
    offset_one[3].features[0].add_(1.5)  # constant +c in one layer contributes c
    checks = [
        (float(lsgan_generator_loss(outs(1.0))), 0.0),
        (float(lsgan_generator_loss(outs(0.0))), 1.0),
        (float(lsgan_generator_loss(outs(0.5))), 0.25),
        (float(lsgan_discriminator_loss(outs(1.0), outs(0.0))), 0.0),
        (float(lsgan_discriminator_loss(outs(0.0), outs(1.0))), 2.0),
        (float(lsgan_discriminator_loss(outs(0.5), outs(0.5))), 0.5),
        (float(feature_matching_loss(outs(0.0), outs(0.0))), 0.0),
        (float(feature_matching_loss(outs(0.0), offset_one)), 1.5),
    ]
    worst = max(abs(got - want) for got, want in checks)
    report("adversarial loss closed forms", worst < 1e-6,
           f"max deviation {worst:.2e} across {len(checks)} identities")


# -- 6. gradient partition -----------------------------------------------------------


def _one_partition_step(weights: LossWeights):
    from ztts.adversary import DiscriminatorBankConfig, SpectrumAnalysis
    from ztts.signal_core import SpectralConfig
    from ztts.trainer import WaveGANTrainerConfig
    from ztts.wavegan import PitchPredictorConfig

    bank = DiscriminatorBankConfig(
        analyses=tuple(SpectrumAnalysis(SpectralConfig(n, n // 4, n), m)
                       for n, m in zip((64, 128, 256, 512, 1024, 2048), (5, 8, 10, 16, 20, 24))),
        base_channels=2, n_layers=2)
    trainer = WaveGANTrainer(
        sample_rate=8000,
        encoder_cfg=EncoderConfig(down_channels=(4, 4, 8, 8), latent_dim=16, stem_channels=4),
        decoder_cfg=DecoderConfig(up_channels=(8, 8, 4, 4), in_channels=16, stem_channels=8),
        pitch_cfg=PitchPredictorConfig(in_channels=16, hidden_channels=4),
        bank_cfg=bank,
        trainer_cfg=WaveGANTrainerConfig(batch_size=2, segment_samples=2048, steps=1),
        weights=weights,
        seed=17,
    )
    rng = np.random.default_rng(3)
    waves = torch.from_numpy((rng.standard_normal((2, 1, 2048)) * 0.3).astype(np.float32))
    lf0 = torch.from_numpy(rng.uniform(4.5, 5.5, size=(2, 8)).astype(np.float32))
    voicing = torch.ones(2, 8, dtype=torch.bool)
    before = {
        "pitch_head": {k: v.clone() for k, v in trainer.pitch_predictor.state_dict().items()},
        "disc": {k: v.clone() for k, v in trainer.bank.state_dict().items()},
    }
    trainer.train_step(waves, lf0, voicing)
    after = {
        "pitch_head": trainer.pitch_predictor.state_dict(),
        "disc": trainer.bank.state_dict(),
    }
    return {
        name: {k: after[name][k] - before[name][k] for k in before[name]}
        for name in before
    }


def test_gradient_partition():
    base = _one_partition_step(LossWeights())
    disc_ok, pitch_ok = True, True
    for zeroed in ("kl", "pitch", "recons", "adv_g", "fm"):
        variant = _one_partition_step(LossWeights(**{zeroed: 0.0}))
        for k in base["disc"]:
            disc_ok &= bool(torch.equal(base["disc"][k], variant["disc"][k]))
        if zeroed != "pitch":
            for k in base["pitch_head"]:
                pitch_ok &= bool(torch.equal(base["pitch_head"][k], variant["pitch_head"][k]))
    no_pitch = _one_partition_step(LossWeights(pitch=0.0))
    pitch_frozen = all(float(v.abs().max()) == 0.0 for v in no_pitch["pitch_head"].values())
    pitch_moves = any(float(v.abs().max()) > 0.0 for v in base["pitch_head"].values())
    report("gradient partition", disc_ok and pitch_ok and pitch_frozen and pitch_moves,
           f"disc invariant={disc_ok}, pitch-head selective={pitch_ok},"
           f" pitch-only-updates={pitch_frozen and pitch_moves} (exact comparisons)")


# -- 7. shape contracts ----------------------------------------------------------------


def test_shape_contracts_full_size():
    torch.manual_seed(0)
    model = WaveGAN()  # published sizes: x256 down-sampling, 256-dim latent
    from ztts.adversary import DiscriminatorBank

    bank = DiscriminatorBank(24000)
    rng = np.random.default_rng(5)
    ok = True
    details = []
    with torch.no_grad():
        for n in (25600, 25601, int(rng.integers(8192, 40000))):
            post = model.encode(torch.randn(1, 1, n) * 0.1)
            want = -(-n // 256)
            ok &= post.frames == want and post.mu.shape[1] == 256
            wav = model.decode(post.mu)
            ok &= wav.shape[-1] == want * 256
            details.append(f"{n}->({post.frames}x{post.mu.shape[1]})->{wav.shape[-1]}")
        outs = bank(torch.randn(1, 8192) * 0.1)
    ok &= len(outs) == 6
    report("shape contracts", ok, "; ".join(details) + f"; discriminators={len(outs)}")


# -- 10. determinism (quick, before the slow experiments) -------------------------------


def test_determinism_bitwise(tmp_path):
    torch.set_num_threads(1)
    try:
        manifest = make_corpus(tmp_path / "corpus", n_clips=3, sample_rate=8000, seed=31)
        cfg = tiny_config(str(tmp_path / "runA"), str(manifest), seed=77)

        def run_losses(workdir):
            c = dataclasses.replace(cfg, workdir=workdir)
            pipeline.prepare_data(c)
            ds = pipeline.load_dataset(c.dataset_dir)
            utts = pipeline.dataset_utterances(ds)
            trainer = WaveGANTrainer(
                sample_rate=c.sample_rate,
                encoder_cfg=c.encoder,
                decoder_cfg=c.decoder,
                pitch_cfg=dataclasses.replace(c.pitch_predictor, in_channels=c.encoder.latent_dim),
                bank_cfg=c.bank,
                trainer_cfg=c.wavegan_trainer,
                weights=c.weights,
                stft_configs=c.stft_loss,
                seed=c.seed,
            )
            sampler = SegmentSampler(utts, c.wavegan_trainer.segment_samples, seed=c.seed)
            log = []
            for _ in range(100):
                waves, lf0, voicing = sampler.sample_batch(c.wavegan_trainer.batch_size)
                log.append(trainer.train_step(waves, lf0, voicing))
            return log

        log_a = run_losses(str(tmp_path / "runA"))
        log_b = run_losses(str(tmp_path / "runB"))
        losses_ok = log_a == log_b

        cfg_t = tiny_config(str(tmp_path / "synth_run"), str(manifest), seed=77)
        pipeline.prepare_data(cfg_t)
        pipeline.train_wavegan_command(cfg_t)
        pipeline.extract_latent_stats(cfg_t)
        pipeline.train_acoustic_command(cfg_t)
        text = pipeline.load_dataset(cfg_t.dataset_dir)["utterances"][0]["transcript"]
        a = pipeline.synthesize_command(cfg_t, text, out_path=tmp_path / "a.wav",
                                        temperature=0.7, seed=5)
        b = pipeline.synthesize_command(cfg_t, text, out_path=tmp_path / "b.wav",
                                        temperature=0.7, seed=5)
        synth_ok = a.read_bytes() == b.read_bytes()
        report("determinism", losses_ok and synth_ok,
               f"100-step loss logs identical={losses_ok}, synthesis bytes identical={synth_ok}")
    finally:
        torch.set_num_threads(2)


# -- 8 & 9. training-based reproductions (slow) -----------------------------------------


@pytest.fixture(scope="module")
def smoke_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    manifest = make_corpus(root / "corpus", n_clips=10, sample_rate=24000, seed=42, n_words=1)
    clips = [load_waveform(p) for p in sorted((root / "corpus" / "wavs").glob("*.wav"))]
    assert len(clips) == 10 and all(c.duration <= 3.0 for c in clips)
    return root, manifest


def test_overfit_smoke(smoke_corpus):
    root, manifest = smoke_corpus
    cfg = smoke_config(str(root / "run"), str(manifest), seed=7,
                       wavegan_steps=4000, acoustic_steps=2000)
    pipeline.prepare_data(cfg)
    ds = pipeline.load_dataset(cfg.dataset_dir)
    utts = pipeline.dataset_utterances(ds)
    tcfg = cfg.wavegan_trainer
    trainer = WaveGANTrainer(
        sample_rate=cfg.sample_rate,
        encoder_cfg=cfg.encoder,
        decoder_cfg=cfg.decoder,
        pitch_cfg=dataclasses.replace(cfg.pitch_predictor, in_channels=cfg.encoder.latent_dim),
        bank_cfg=cfg.bank,
        trainer_cfg=tcfg,
        weights=cfg.weights,
        stft_configs=cfg.stft_loss,
        seed=cfg.seed,
        steps_per_epoch=max(1, len(utts) // tcfg.batch_size),
    )
    sampler = SegmentSampler(utts, tcfg.segment_samples, seed=cfg.seed)

    def held_in_mel_l1():
        gen = torch.Generator().manual_seed(99)
        vals = []
        with torch.no_grad():
            for rec in ds["utterances"]:
                w = pipeline._utterance_audio(ds, rec)
                x = torch.from_numpy(w.samples)[None, None]
                pad = (256 - len(w) % 256) % 256
                post = trainer.encoder(torch.nn.functional.pad(x, (0, pad)))
                z = post.mu + post.sigma * torch.randn(post.mu.shape, generator=gen)
                wav = trainer.decoder(z).squeeze().numpy()[: len(w)]
                vals.append(pipeline.mel_l1_distance(w, Waveform(wav, cfg.sample_rate)))
        return float(np.mean(vals))

    t0 = time.time()
    mel_l1 = held_in_mel_l1()
    step_budget = tcfg.steps  # well under the 20k allowance
    while trainer.step < step_budget:
        train_wavegan(trainer, sampler, steps=200)
        mel_l1 = held_in_mel_l1()
        if mel_l1 < 0.5:
            break
    wavegan_ok = mel_l1 < 0.5
    trainer.save(cfg.wavegan_dir / "checkpoint.pt", sampler)
    print(f"  stage-1 mel_l1={mel_l1:.3f} at step {trainer.step}"
          f" ({time.time() - t0:.0f}s)")

    # reconstructions keep the periodic (voiced) structure of the originals
    recon_paths = pipeline.reconstruct_command(cfg, out_dir=root / "recon")
    voiced_ratio = []
    for path, rec in zip(recon_paths, ds["utterances"]):
        orig = pipeline._utterance_pitch(ds, rec)
        recon = extract_pitch(load_waveform(path))
        n_orig = max(1, int(orig.voicing.sum()))
        voiced_ratio.append(float((orig.voicing & recon.voicing).sum()) / n_orig)
    speechlike_ok = float(np.mean(voiced_ratio)) > 0.5

    # stage 2 on the cached posteriors
    t0 = time.time()
    pipeline.extract_latent_stats(cfg)
    corpus, _ = pipeline.load_latent_corpus(cfg, ds)
    from ztts.trainer import AcousticTrainer

    ac = AcousticTrainer(
        cfg.text_encoder_config(len(ds["vocab"])),
        dataclasses.replace(cfg.flow, channels=cfg.encoder.latent_dim),
        cfg.acoustic_trainer,
        seed=cfg.seed,
        steps_per_epoch=len(corpus),
    )
    nlls = []
    target = None
    while ac.step < cfg.acoustic_trainer.steps:
        mu, ls, tokens = corpus[ac.rng.integers(len(corpus))]
        nlls.append(ac.train_step(mu, ls, tokens)["nll_per_dim"])
        if len(nlls) == 100:
            target = 0.7 * float(np.mean(nlls))
        if target is not None and len(nlls) >= 200 and float(np.mean(nlls[-100:])) < target:
            break
    first100 = float(np.mean(nlls[:100]))
    last100 = float(np.mean(nlls[-100:]))
    drop = 1.0 - last100 / first100
    acoustic_ok = drop >= 0.30
    print(f"  stage-2 nll/dim {first100:.3f} -> {last100:.3f}"
          f" ({drop * 100:.0f}% drop, {ac.step} steps, {time.time() - t0:.0f}s)")
    report(
        "overfit smoke",
        wavegan_ok and speechlike_ok and acoustic_ok,
        f"mel_l1={mel_l1:.3f} (<0.5: {wavegan_ok});"
        f" voiced overlap={np.mean(voiced_ratio):.2f} (speech-like: {speechlike_ok});"
        f" nll/dim drop={drop * 100:.0f}% (>=30%: {acoustic_ok})",
    )


def test_pitch_supervision_ablation(smoke_corpus):
    root, manifest = smoke_corpus
    cfg = smoke_config(str(root / "ablation_run"), str(manifest), seed=13)
    pipeline.prepare_data(cfg)
    ds = pipeline.load_dataset(cfg.dataset_dir)
    utts = pipeline.dataset_utterances(ds)
    steps = 400
    curves = stop_gradient_pitch_experiment(
        utts, steps,
        sample_rate=cfg.sample_rate,
        encoder_cfg=cfg.encoder,
        decoder_cfg=cfg.decoder,
        bank_cfg=cfg.bank,
        trainer_cfg=cfg.wavegan_trainer,
        weights=cfg.weights,
        stft_configs=cfg.stft_loss,
        seed=cfg.seed,
    )
    flowing = np.array([v for _, v in curves["flowing"]])
    stopped = np.array([v for _, v in curves["stopped"]])

    def smooth(x, k=25):
        return np.convolve(x, np.ones(k) / k, mode="valid")

    sm_f, sm_s = smooth(flowing), smooth(stopped)
    half = len(sm_f) // 2
    above_frac = float((sm_s[half:] > sm_f[half:]).mean())
    tail = max(1, steps // 10)
    final_f = float(np.mean(flowing[-tail:]))
    final_s = float(np.mean(stopped[-tail:]))
    margin = 1.0 - final_f / final_s
    ok = above_frac == 1.0 and margin >= 0.20
    report(
        "pitch supervision ablation",
        ok,
        f"blocked-gradient curve above for {above_frac * 100:.0f}% of final half;"
        f" final pitch loss {final_f:.3f} vs {final_s:.3f}"
        f" ({margin * 100:.0f}% lower with gradient flowing)",
    )
