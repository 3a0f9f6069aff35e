"""The ten acceptance criteria, each at its stated tolerance and runtime.

Every test records one PASS/FAIL line that is printed in the terminal
summary. Golden convergence values come from the fixed-seed reference runs
on this machine and are checked with a +10% band.
"""

import contextlib
import math
import time

import mpmath
import numpy as np
import pytest

from dimamba import block, cli, config, efficiency, ssm
from dimamba.diffusion import (cfg_combine, ddpm_sample, loss_simple, make_schedule,
                               posterior_params, q_sample)
from dimamba.model import SIZES, ModelConfig, build_model, count_params
from dimamba.numerics import Rng
from dimamba.patchify import PatchGrid, depatchify, patchify, pos_embed_table
from dimamba.train import Trainer

from conftest import ACCEPTANCE_RESULTS, assert_grads_match, micro_config, perturbed_model

# fixed-seed reference runs: mean loss of the last 100 (toy) and 200 (video) steps
GOLDEN_TOY_LOSS = 0.04144
GOLDEN_VIDEO_LOSS = 0.06277
GOLDEN_BAND = 1.10

PUBLISHED_PARAMS_M = {"S": 33.71, "B": 134.37, "L": 473.73, "XL": 673.82}
PUBLISHED_DIM_XL2 = (294.58, 1175.7, 4700.17, 18798.04)


@contextlib.contextmanager
def criterion(num, title, budget_s):
    info = {"detail": ""}
    t0 = time.perf_counter()
    try:
        yield info
        secs = time.perf_counter() - t0
        assert secs < budget_s, f"took {secs:.1f}s, budget {budget_s:.0f}s"
    except BaseException as exc:
        secs = time.perf_counter() - t0
        ACCEPTANCE_RESULTS.append((num, title, False, f"{info['detail']} {exc}".strip(), secs))
        raise
    ACCEPTANCE_RESULTS.append((num, title, True, info["detail"], secs))


# -- 1 -----------------------------------------------------------------------

def test_c01_scan_equals_convolution():
    with criterion(1, "scan/kernel equivalence", 1.0) as info:
        g = np.random.default_rng(1)
        worst = 0.0
        for L in (1, 2, 16, 64):
            for Di in (1, 4):
                N = 16
                x = g.standard_normal((1, L, Di))
                A = -np.exp(g.uniform(-1, 1.5, (Di, N)))
                d = np.exp(g.uniform(-4, 0, Di))
                b, c = g.standard_normal(N), g.standard_normal(N)
                dskip = g.standard_normal(Di)
                y, _, _ = ssm.scan(x, np.broadcast_to(d, (1, L, Di)), A,
                                   np.broadcast_to(b, (1, L, N)), np.broadcast_to(c, (1, L, N)), dskip)
                # convolution with the kernel K_k = sum_n c_n a_n^k b_bar_n, built directly
                a_bar = np.exp(d[:, None] * A)
                b_bar = np.expm1(d[:, None] * A) / A * b
                ref = np.zeros((L, Di))
                for t in range(L):
                    for k in range(t + 1):
                        ref[t] += (c * a_bar ** k * b_bar).sum(axis=1) * x[0, t - k]
                ref += dskip * x[0]
                worst = max(worst, float(np.max(np.abs(y[0] - ref))))
        info["detail"] = f"max abs diff {worst:.2e} (tol 1e-10)"
        assert worst < 1e-10


# -- 2 -----------------------------------------------------------------------

def test_c02_zoh_closed_form():
    with criterion(2, "ZOH discretization", 1.0) as info:
        g = np.random.default_rng(2)
        n = 1000
        a = -np.exp(g.uniform(-3, 3, n))
        delta = np.exp(g.uniform(-6, 1, n))
        delta[:150] = 10.0 ** g.uniform(-14, -9, 150) / -a[:150]  # |delta a| < 1e-8
        b = g.standard_normal(n)
        a_bar, b_bar = ssm.discretize_zoh(a, delta, b)
        mpmath.mp.dps = 40
        worst = 0.0
        for i in range(n):
            ai, di, bi = (mpmath.mpf(float(v)) for v in (a[i], delta[i], b[i]))
            e = mpmath.exp(di * ai)
            ref_a, ref_b = e, (e - 1) / ai * bi
            worst = max(worst, abs(float((a_bar[i] - ref_a) / ref_a)),
                        abs(float((b_bar[i] - ref_b) / ref_b)))
        series = int(np.sum(np.abs(delta * a) < ssm.SERIES_THRESHOLD))
        info["detail"] = f"max rel error {worst:.2e} over {n} triples, {series} in series range (tol 1e-12)"
        assert series >= 100 and worst < 1e-12


# -- 3 -----------------------------------------------------------------------

def test_c03_gradients_match_finite_differences():
    with criterion(3, "gradient soundness", 60.0) as info:
        count = 0
        for seed in range(6):
            p = ssm.init_ssm_params(3, 4, Rng(seed), dt_rank=2)
            x = Rng(100 + seed).gen.standard_normal((2, 5, 3))
            G = Rng(200 + seed).gen.standard_normal(x.shape)
            gx, gp = ssm.selective_scan_backward(x, p, G)
            assert_grads_match(lambda: float(np.sum(ssm.selective_scan(x, p) * G)),
                               {"x": x, **p}, {"x": gx, **gp})
            count += 1
        for seed in range(6):
            r = Rng(300 + seed)
            p = block.init_block_params(4, r, n=3)
            for k in p:
                p[k] = p[k] + 0.3 * r.gen.standard_normal(p[k].shape)
            x = r.gen.standard_normal((2, 4, 4))
            c = r.gen.standard_normal((2, 4))
            G = r.gen.standard_normal(x.shape)
            gx, gc, gp = block.dim_block_backward(x, c, p, G)
            assert_grads_match(lambda: float(np.sum(block.dim_block_forward(x, c, p) * G)),
                               {"x": x, "c": c, **p}, {"x": gx, "c": gc, **gp})
            count += 1
        cfg = micro_config(layers=1, hidden_d=4, ssm_state_n=2, freq_dim=4)
        for seed in range(4):
            m = perturbed_model(cfg, 400 + seed, scale=0.3)
            g = Rng(500 + seed).gen
            z = g.standard_normal((2,) + m.grid.latent_shape)
            t, y = g.integers(1, 1001, 2), np.array([seed % 3, -1])
            G = g.standard_normal(z.shape)
            out, cache = m.forward_cached(z, t, y)
            grads = m.backward(cache, G)
            # gradients of some parameters sit ~1e-6 below the output scale, so a
            # wider central-difference step keeps roundoff out of the comparison
            assert_grads_match(lambda: float(np.sum(m.forward_cached(z, t, y)[0] * G)), m.params, grads,
                               eps=1e-4)
            count += 1
        for seed in range(4):
            m = perturbed_model(cfg, 600 + seed, scale=0.3)
            g = Rng(700 + seed).gen
            z0 = g.standard_normal((2,) + m.grid.latent_shape)
            eps = g.standard_normal(z0.shape)
            t, y = g.integers(1, 1001, 2), np.array([-1, seed % 3])
            _, grads = loss_simple(m, z0, t, eps, y)
            assert_grads_match(lambda: loss_simple(m, z0, t, eps, y)[0], m.params, grads, eps=1e-4)
            count += 1
        info["detail"] = f"{count} instances (scan, block, model, loss) within rel 1e-4"
        assert count >= 20


# -- 4 -----------------------------------------------------------------------

def test_c04_ddpm_identities():
    with criterion(4, "DDPM identities", 30.0) as info:
        s = make_schedule(1000, 1e-4, 0.02)
        ab = s.alpha_bar
        assert ab[0] == s.alpha[0] and np.all(ab[1:] == ab[:-1] * s.alpha[1:])

        n, z0 = 100_000, 0.6
        g = np.random.default_rng(4)
        worst_sigma = 0.0
        z = np.full(n, z0)
        for t in range(1, 201):
            z = math.sqrt(1 - s.beta[t - 1]) * z + math.sqrt(s.beta[t - 1]) * g.standard_normal(n)
            if t in (1, 10, 50, 200):
                closed = q_sample(np.full(n, z0), t, g.standard_normal(n), s)
                var = 1 - ab[t - 1]
                se_m, se_v = math.sqrt(var / n), var * math.sqrt(2 / (n - 1))
                for sample in (z, closed):
                    worst_sigma = max(worst_sigma, abs(sample.mean() - math.sqrt(ab[t - 1]) * z0) / se_m,
                                      abs(sample.var(ddof=1) - var) / se_v)
        assert worst_sigma < 4

        worst = 0.0
        for _ in range(500):
            t = int(g.integers(2, 1001))
            zt, zz = g.uniform(-3, 3, 2)
            mean, var = posterior_params(np.array([zt]), np.array([zz]), t, s)
            v0 = 1 - ab[t - 2]
            prec = 1 / v0 + s.alpha[t - 1] / s.beta[t - 1]
            m_ref = (math.sqrt(ab[t - 2]) * zz / v0 + math.sqrt(s.alpha[t - 1]) * zt / s.beta[t - 1]) / prec
            worst = max(worst, abs(mean[0] - m_ref), abs(var - 1 / prec))
        info["detail"] = f"recursion exact; MC within {worst_sigma:.2f} sigma; posterior diff {worst:.1e}"
        assert worst < 1e-12


# -- 5 -----------------------------------------------------------------------

def test_c05_architecture_ladder():
    with criterion(5, "architecture ladder", 60.0) as info:
        counts = {}
        for size, (layers, d) in {"S": (16, 384), "B": (16, 768), "L": (32, 1024), "XL": (36, 1152)}.items():
            cfg = ModelConfig.preset(size, patch=2, in_channels=4, num_classes=1000, input_size=32)
            m = build_model(cfg, Rng(0), materialize=False)
            assert (m.cfg.layers, m.cfg.hidden_d) == (layers, d) == SIZES[size]
            counts[size] = count_params(m) / 1e6
            assert abs(counts[size] / PUBLISHED_PARAMS_M[size] - 1) <= 0.15
        ratio = counts["L"] / counts["B"]
        assert abs(ratio / 3.53 - 1) <= 0.10
        info["detail"] = ", ".join(f"{k} {v:.2f}M" for k, v in counts.items()) + f"; L/B {ratio:.2f}"


# -- 6 -----------------------------------------------------------------------

def test_c06_complexity_scaling():
    with criterion(6, "complexity scaling", 120.0) as info:
        for L in (1, 7, 256, 1024, 4096):
            for D in (1, 384, 1152):
                assert efficiency.flops_dim(4 * L, D) == 4 * efficiency.flops_dim(L, D)

        models, inputs = [], []
        for frames in (1, 2):
            cfg = ModelConfig(size_tag="custom", layers=1, hidden_d=8, patch=2, in_channels=1,
                              num_classes=2, frames=frames, input_size=64, ssm_state_n=4, freq_dim=8)
            models.append(perturbed_model(cfg, 3))
            inputs.append(np.random.default_rng(frames).standard_normal((1,) + cfg.grid.latent_shape))
        best = [math.inf, math.inf]
        for _ in range(9):
            for i in (0, 1):
                t0 = time.perf_counter()
                models[i](inputs[i], 10, 0)
                best[i] = min(best[i], time.perf_counter() - t0)
        timing = best[1] / best[0]
        assert 1.4 <= timing <= 2.6

        rep = efficiency.gflops_report([("dim", "XL", 2)], [256, 512, 1024, 2048], walker=True)
        ratios = [b / a for row in rep.rows for a, b in zip(row.counts, row.counts[1:])]
        published = [b / a for a, b in zip(PUBLISHED_DIM_XL2, PUBLISHED_DIM_XL2[1:])]
        assert all(3.95 <= r <= 4.05 for r in ratios + published)
        info["detail"] = (f"f(4L)=4f(L) exact; time(2L)/time(L) {timing:.2f} at L=1024; "
                          f"report ratios {min(ratios):.3f}..{max(ratios):.3f}")


# -- 7 -----------------------------------------------------------------------

def toy_run_config():
    return config.replace(config.RunConfig(),
                          optimizer={"learning_rate": 1e-3, "batch_size": 16, "steps": 5000},
                          train={"ema_decay": 0.995, "hflip": False, "seed": 0})


@pytest.mark.slow
def test_c07_toy_generation():
    with criterion(7, "end-to-end toy generation", 600.0) as info:
        tr = Trainer(toy_run_config())
        losses = tr.run(5000)
        initial, final = losses[0], float(np.mean(losses[-100:]))
        assert final < 0.35 * initial
        assert final <= GOLDEN_TOY_LOSS * GOLDEN_BAND

        model = tr.model.with_params(tr.ema.shadow)
        modes = tr.dataset.modes()
        sigma = tr.dataset.sigma
        y = np.arange(512) % 2
        notes = []
        for scale in (1.0, 1.5):
            z = ddpm_sample(model, tr.sched, (512,) + tr.dataset.shape, y=y, cfg_scale=scale,
                            steps=50, rng=Rng(7))
            rms = np.sqrt(((z[None] - modes[:, None]) ** 2).mean(axis=(2, 3, 4, 5)))
            covered = float(np.mean(rms.min(axis=0) <= 3 * sigma))
            hits = np.bincount(rms.argmin(axis=0), minlength=2)
            notes.append(f"cfg {scale}: {covered:.1%} within 3 sigma, modes {hits.tolist()}")
            assert covered >= 0.95 and hits.min() >= 0.1 * 512
        info["detail"] = f"loss {initial:.3f} -> {final:.4f} (golden {GOLDEN_TOY_LOSS}); " + "; ".join(notes)


# -- 8 -----------------------------------------------------------------------

def test_c08_roundtrips_and_determinism(tmp_path, capsys):
    with criterion(8, "roundtrips and determinism", 30.0) as info:
        g = np.random.default_rng(8)
        for grid in (PatchGrid(8, 8, 4, 2), PatchGrid(16, 16, 1, 4, 8), PatchGrid(32, 32, 3, 8)):
            z = g.standard_normal((2,) + grid.latent_shape)
            assert depatchify(patchify(z, grid), grid).tobytes() == z.tobytes()

        cfg = config.replace(config.RunConfig(), model={"layers": 1, "hidden_d": 8, "ssm_state_n": 4,
                                                        "freq_dim": 8},
                             optimizer={"batch_size": 4, "learning_rate": 1e-3},
                             diffusion={"timesteps": 50}, train={"output_dir": str(tmp_path / "run")})
        full = Trainer(cfg)
        ref = full.run(8)
        part = Trainer(cfg)
        first = part.run(4)
        part.save(str(tmp_path / "mid.dimc"))
        resumed = Trainer.load(str(tmp_path / "mid.dimc"))
        assert first + resumed.run(8) == ref
        assert all(np.array_equal(full.model.params[k], resumed.model.params[k]) for k in full.model.params)

        ini = tmp_path / "run.ini"
        ini.write_text(config.dumps(config.replace(cfg, optimizer={"steps": 4})))
        blobs = []
        out = tmp_path / "out"  # the checkpoint echoes its output directory, so reuse one
        for _ in range(2):
            assert cli.main(["train", str(ini), "--output", str(out)]) == 0
            ck = str(out / "checkpoint.dimc")
            assert cli.main(["sample", ck, "--count", "2", "--class", "0", "--steps", "4",
                             "--seed", "5", "--out", str(out / "s")]) == 0
            assert cli.main(["flops", "--arch", "all", "--csv", str(out / "f.csv")]) == 0
            blobs.append([(out / "checkpoint.dimc").read_bytes(), (out / "s" / "samples.dimt").read_bytes(),
                          (out / "f.csv").read_bytes(), capsys.readouterr().out])
        assert blobs[0] == blobs[1]
        info["detail"] = "patchify bit-exact; resume bit-identical; train/sample/flops outputs byte-stable"


# -- 9 -----------------------------------------------------------------------

def test_c09_cfg_identities():
    with criterion(9, "CFG identities", 1.0) as info:
        g = np.random.default_rng(9)
        c, u = g.standard_normal((4, 16)), g.standard_normal((4, 16))
        assert np.array_equal(cfg_combine(c, u, 1.0), c)
        assert np.array_equal(cfg_combine(c, u, 0.0), u)
        info["detail"] = "s=1 gives the conditional branch and s=0 the unconditional one, exactly"


# -- 10 ----------------------------------------------------------------------

def video_run_config():
    return config.replace(config.RunConfig(), model={"hidden_d": 32},
                          data={"name": "moving_bar_video"},
                          optimizer={"learning_rate": 1e-3, "batch_size": 2, "steps": 2000},
                          train={"ema_decay": 0.995, "seed": 0})


@pytest.mark.slow
def test_c10_video_path():
    with criterion(10, "video path", 600.0) as info:
        tr = Trainer(video_run_config())
        grid = tr.model.grid
        assert grid.l_total == grid.t_frames * grid.l_per_frame == 8 * 64 == 512
        pos = pos_embed_table(grid, 32)
        for t in range(1, 8):
            assert not np.allclose(pos[5], pos[t * 64 + 5])
        assert len(np.unique(pos.round(12), axis=0)) == 512

        losses = tr.run(2000)
        initial, final = losses[0], float(np.mean(losses[-200:]))
        assert final < 0.35 * initial
        assert final <= GOLDEN_VIDEO_LOSS * GOLDEN_BAND
        info["detail"] = f"512 tokens, frame-distinct positions; loss {initial:.3f} -> {final:.4f} (golden {GOLDEN_VIDEO_LOSS})"
