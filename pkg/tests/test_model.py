import numpy as np
import pytest

from csmud.model import (
    ConfigError,
    SystemConfig,
    complex_normal,
    evolve_channel,
    frame_from_dict,
    frame_to_dict,
    generate_channel,
    generate_frame,
    generate_spreading,
    get_constellation,
    load_frame,
    noise_variance,
    save_frame,
    synthesize_frame,
)


@pytest.mark.parametrize(
    "kw",
    [
        dict(K=100, N=100),
        dict(K=50, N=60),
        dict(J=0),
        dict(sparsity_range=(5, 3)),
        dict(sparsity_range=(0, 201)),
        dict(beta=1.0),
        dict(beta=-0.1),
        dict(modulation="8psk"),
        dict(snr_mode="loud"),
    ],
)
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        SystemConfig(**kw)


@pytest.mark.parametrize("name", ["bpsk", "qpsk", "16qam"])
def test_constellation_unit_energy(name):
    c = get_constellation(name)
    assert np.mean(np.abs(c.symbols) ** 2) == pytest.approx(1.0)
    assert c.augmented[-1] == 0 and len(c.augmented) == c.M + 1


def test_constellation_sorted_lexicographically():
    s = get_constellation("qpsk").symbols
    keys = list(zip(s.real, s.imag))
    assert keys == sorted(keys)


def test_spreading_columns_unit_norm_and_deterministic():
    cfg = SystemConfig()
    S = generate_spreading(cfg, np.random.default_rng(3))
    assert S.shape == (100, 200)
    assert np.allclose(np.linalg.norm(S, axis=0), 1.0, atol=1e-12)
    assert np.array_equal(S, generate_spreading(cfg, np.random.default_rng(3)))
    gram = np.abs(S.conj().T @ S)
    np.fill_diagonal(gram, 0)
    assert gram.max() < 1
    assert np.iscomplexobj(S) and np.abs(S.imag).max() > 0


def test_real_spreading_option():
    S = generate_spreading(SystemConfig(spreading="real"), np.random.default_rng(0))
    assert np.all(S.imag == 0)
    assert np.allclose(np.linalg.norm(S, axis=0), 1.0)


def test_channel_statistics():
    h = complex_normal(np.random.default_rng(1), (1000, 1000))
    assert np.mean(np.abs(h) ** 2) == pytest.approx(1.0, abs=0.01)
    assert np.var(h.real) == pytest.approx(0.5, abs=0.01)
    assert np.var(h.imag) == pytest.approx(0.5, abs=0.01)
    cfg = SystemConfig()
    assert np.array_equal(generate_channel(cfg, np.random.default_rng(5)), generate_channel(cfg, np.random.default_rng(5)))


def test_evolve_channel():
    rng = np.random.default_rng(2)
    h = complex_normal(rng, (4, 6))
    same = evolve_channel(h, 0.0, rng)
    assert np.array_equal(same, h) and same is not h

    pure = evolve_channel(h, 1.0, np.random.default_rng(9))
    assert np.array_equal(pure, complex_normal(np.random.default_rng(9), (4, 6)))

    out = evolve_channel(h, 0.02, np.random.default_rng(11))
    dh = complex_normal(np.random.default_rng(11), (4, 6))
    for n, k in [(0, 0), (1, 3), (3, 5)]:
        assert out[n, k] == pytest.approx(0.98 * h[n, k] + 0.02 * dh[n, k], abs=1e-15)
    with pytest.raises(ConfigError):
        evolve_channel(h, 1.5, rng)


def test_frame_structure():
    cfg = SystemConfig(seed=4)
    f = synthesize_frame(cfg)
    assert np.array_equal(f.G, f.H * f.S)
    active = np.flatnonzero(np.any(f.X != 0, axis=1))
    assert tuple(active) == f.gamma_true
    assert 18 <= len(f.gamma_true) <= 20
    pts = set(get_constellation("qpsk").symbols.tolist())
    assert set(f.X[list(f.gamma_true)].ravel().tolist()) <= pts
    assert np.all(np.any(f.X[list(f.gamma_true)] != 0, axis=1) == np.all(f.X[list(f.gamma_true)] != 0, axis=1))


def test_frame_deterministic():
    a = synthesize_frame(SystemConfig(seed=8))
    b = synthesize_frame(SystemConfig(seed=8))
    for name in ("S", "H", "G", "X", "Y"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert a.gamma_true == b.gamma_true


def test_empty_support_gives_pure_noise():
    cfg = SystemConfig(K=10, N=5, J=3, sparsity_range=(0, 0))
    rng = np.random.default_rng(0)
    S, H = generate_spreading(cfg, rng), generate_channel(cfg, rng)
    f = generate_frame(cfg, S, H, np.random.default_rng(1))
    assert not f.X.any() and f.gamma_true == ()
    # draw order: sparsity, support, symbols, noise
    rng2 = np.random.default_rng(1)
    rng2.integers(0, 1)
    rng2.choice(10, size=0, replace=False)
    rng2.integers(0, 4, size=(0, 3))
    assert np.allclose(f.Y, complex_normal(rng2, (5, 3), f.sigma2))


def test_noiseless_single_user():
    cfg = SystemConfig(K=6, N=4, J=1, sparsity_range=(1, 1))
    rng = np.random.default_rng(0)
    S, H = generate_spreading(cfg, rng), generate_channel(cfg, rng)
    f = generate_frame(cfg, S, H, rng, sigma2=0.0)
    (k,) = f.gamma_true
    assert np.allclose(f.Y[:, 0], f.G[:, k] * f.X[k, 0], atol=1e-15)


def test_noise_variance_conventions():
    assert noise_variance(SystemConfig(snr_db=10, snr_mode="per_user")) == pytest.approx(0.1)
    # mean |Gamma| = 19 over N = 100 entries
    assert noise_variance(SystemConfig(snr_db=0)) == pytest.approx(0.19)


def test_noise_second_moment():
    cfg = SystemConfig(K=40, N=20, J=7, sparsity_range=(3, 5), snr_db=3.0)
    rng = np.random.default_rng(12)
    acc, count = 0.0, 0
    while count < 20_000:
        f = synthesize_frame(cfg, rng)
        V = f.Y - f.G @ f.X
        acc += np.sum(np.abs(V) ** 2)
        count += V.size
    assert acc / count == pytest.approx(cfg.noise_variance, rel=0.05)


def test_sparsity_frequencies():
    cfg = SystemConfig()
    rng = np.random.default_rng(21)
    S, H = generate_spreading(cfg, rng), generate_channel(cfg, rng)
    counts = {18: 0, 19: 0, 20: 0}
    n = 10_000
    for _ in range(n):
        counts[len(generate_frame(cfg, S, H, rng).gamma_true)] += 1
    for c in counts.values():
        assert abs(c / n - 1 / 3) <= 0.02


def test_drift_frame_uses_evolving_channel():
    cfg = SystemConfig(K=12, N=6, J=4, sparsity_range=(3, 3), beta=0.5, seed=3)
    f = synthesize_frame(cfg)
    assert f.H_slots.shape == (4, 6, 12)
    assert np.array_equal(f.H_slots[0], f.H)
    V = f.Y - np.einsum("jnk,kj->nj", f.H_slots * f.S, f.X)
    assert np.abs(V).max() < 10 * np.sqrt(f.sigma2)
    assert not np.allclose(f.Y - V, f.G @ f.X)
    # the receiver's G stays the slot-1 channel
    assert np.array_equal(f.G, f.H * f.S)


def test_json_round_trip(tmp_path):
    f = synthesize_frame(SystemConfig(K=12, N=6, J=3, sparsity_range=(2, 4), beta=0.1, seed=1))
    back = frame_from_dict(frame_to_dict(f))
    for name in ("S", "H", "G", "X", "Y", "H_slots"):
        assert np.array_equal(getattr(back, name), getattr(f, name))
    path = tmp_path / "frame.json"
    save_frame(f, path)
    again = load_frame(path)
    assert again.gamma_true == f.gamma_true and again.sigma2 == f.sigma2
    assert frame_to_dict(f)["S"][0][0] == [f.S[0, 0].real, f.S[0, 0].imag]


def test_json_rejects_foreign_documents():
    with pytest.raises(ValueError):
        frame_from_dict({"schema": "other"})
