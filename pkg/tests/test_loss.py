import numpy as np
import pytest

from oracles import (affine_field, fd_check, gradicon_oracle, lncc_oracle, random_instance,
                     smooth_probes)
from longireg.loss import (LossConfig, NumericalError, Objective, check_finite, gradicon_reg,
                           lncc_loss, loss_gradient, total_loss)
from longireg.transform import DisplacementField, compose, identity_field
from longireg.volume import Grid3, Volume3


@pytest.fixture
def pair(rng):
    i_a, i_b, f_ab, f_ba = random_instance(rng)
    return i_a, i_b, f_ab, f_ba


class TestLncc:
    def test_identical(self, pair):
        i_a = pair[0]
        assert lncc_loss(i_a, i_a) <= 1e-3

    def test_sign_invariant(self, pair):
        i_a = pair[0]
        centred = i_a.with_data(i_a.data - i_a.data.mean())
        neg = i_a.with_data(-centred.data)
        assert lncc_loss(centred, neg) == pytest.approx(lncc_loss(centred, centred), abs=1e-12)

    def test_constant_images(self):
        g = Grid3((8, 8, 8))
        assert lncc_loss(Volume3(g, np.full(g.dims, 3.0)), Volume3(g, np.full(g.dims, -1.0))) == 1.0

    def test_matches_scipy_oracle(self, pair):
        i_a, i_b = pair[:2]
        cfg = LossConfig(lncc_sigma=1.5)
        assert lncc_loss(i_a, i_b, cfg) == pytest.approx(
            lncc_oracle(i_a.data, i_b.data, 1.5), abs=1e-10)

    def test_in_unit_interval(self, pair):
        assert 0.0 <= lncc_loss(pair[0], pair[1]) <= 1.0


class TestGradicon:
    def test_identity(self):
        g = Grid3((6, 6, 6))
        assert gradicon_reg(identity_field(g), identity_field(g)) == 0.0

    def test_inverse_translations(self):
        g = Grid3((12, 12, 12))
        t = np.array([1.5, -2.0, 0.5])[:, None, None, None] * np.ones((3,) + g.dims)
        fwd, bwd = DisplacementField(g, t), DisplacementField(g, -t)
        uc = compose(fwd, bwd).u
        # clamping only disturbs a band of width |t| at the faces
        grads = np.stack([np.gradient(uc[c]) for c in range(3)])
        assert np.abs(grads[:, :, 4:-4, 4:-4, 4:-4]).max() <= 1e-12
        assert gradicon_reg(fwd, bwd) == pytest.approx(gradicon_oracle(fwd.u, bwd.u), abs=1e-12)

    def test_linear_ab(self):
        g = Grid3((8, 8, 8))
        alpha = 0.07
        f_ab = affine_field(g, alpha * np.eye(3))
        val = gradicon_reg(f_ab, identity_field(g))
        assert val == pytest.approx(3 * alpha**2, abs=1e-12)

    @pytest.mark.parametrize("stride", [1, 2, 3])
    def test_brute_force(self, rng, stride):
        _, _, f_ab, f_ba = random_instance(rng, n=8)
        cfg = LossConfig(reg_subsample=stride)
        assert gradicon_reg(f_ab, f_ba, cfg) == pytest.approx(
            gradicon_oracle(f_ab.u, f_ba.u, stride), abs=1e-9)


class TestTotalLoss:
    def test_identical_inputs(self, pair):
        i_a = pair[0]
        ident = identity_field(i_a.grid)
        br = total_loss(i_a, i_a, ident, ident)
        assert br.sim_ab <= 1e-3 and br.sim_ba <= 1e-3 and br.reg == 0.0

    def test_swap_symmetry(self, pair):
        i_a, i_b, f_ab, f_ba = pair
        fwd = total_loss(i_a, i_b, f_ab, f_ba)
        rev = total_loss(i_b, i_a, f_ba, f_ab)
        assert rev.sim_ab == pytest.approx(fwd.sim_ba, abs=1e-14)
        assert rev.sim_ba == pytest.approx(fwd.sim_ab, abs=1e-14)
        assert rev.reg == pytest.approx(gradicon_reg(f_ba, f_ab), abs=1e-14)

    def test_lambda_zero(self, pair):
        br = total_loss(*pair, LossConfig(lam=0.0))
        assert br.total == br.sim_ab + br.sim_ba

    def test_components(self, pair):
        i_a, i_b, f_ab, f_ba = pair
        cfg = LossConfig()
        br = total_loss(i_a, i_b, f_ab, f_ba, cfg)
        from longireg.transform import warp
        assert br.sim_ab == pytest.approx(lncc_loss(warp(i_a, f_ab), i_b), abs=1e-12)
        assert br.sim_ba == pytest.approx(lncc_loss(warp(i_b, f_ba), i_a), abs=1e-12)
        assert br.total == pytest.approx(br.sim_ab + br.sim_ba + cfg.lam * br.reg, abs=1e-14)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(lam=-1.0)
        with pytest.raises(ValueError):
            LossConfig(reg_subsample=0)

    def test_config_dict_uses_lambda_key(self):
        d = LossConfig(lam=0.5).to_dict()
        assert d["lambda"] == 0.5
        assert LossConfig.from_dict(d).lam == 0.5


class TestGradient:
    def test_stationary(self, pair):
        i_a = pair[0]
        ident = identity_field(i_a.grid)
        for wrt in ("f_ab", "f_ba"):
            g = loss_gradient(i_a, i_a, ident, ident, wrt=wrt)
            assert np.linalg.norm(g) <= 1e-6

    @pytest.mark.parametrize("wrt", ["f_ab", "f_ba"])
    def test_finite_differences(self, rng, wrt):
        for _ in range(5):
            i_a, i_b, f_ab, f_ba = random_instance(rng)
            u = (f_ab if wrt == "f_ab" else f_ba).u
            probes = smooth_probes(u, rng, 4)
            for analytic, numeric in fd_check(i_a, i_b, f_ab, f_ba, LossConfig(), wrt, probes):
                if abs(numeric) >= 1e-8:
                    assert abs(analytic - numeric) <= 1e-4 * abs(numeric)

    def test_lambda_linearity(self, pair):
        i_a, i_b, f_ab, f_ba = pair
        for wrt in ("f_ab", "f_ba"):
            g0 = loss_gradient(i_a, i_b, f_ab, f_ba, LossConfig(lam=0.0), wrt=wrt)
            g1 = loss_gradient(i_a, i_b, f_ab, f_ba, LossConfig(lam=1.0), wrt=wrt)
            g2 = loss_gradient(i_a, i_b, f_ab, f_ba, LossConfig(lam=2.0), wrt=wrt)
            assert np.allclose(g2 - g0, 2 * (g1 - g0), rtol=0, atol=1e-12)

    def test_bad_wrt(self, pair):
        with pytest.raises(ValueError):
            loss_gradient(*pair, wrt="theta")

    def test_composed_objective_fd(self, rng):
        # residual form: sources pre-warped with a coarse pair, reg on coarse o residual
        i_a, i_b, c_ab, c_ba = random_instance(rng, amp=1.0)
        _, _, r_ab, r_ba = random_instance(rng, amp=0.8)
        obj = Objective(i_a, i_b, i_b, i_a, LossConfig(), coarse=(c_ab.u, c_ba.u))
        _, grads = obj.evaluate(r_ab.u, r_ba.u, want=("ab", "ba"))
        for name, field in (("ab", r_ab), ("ba", r_ba)):
            for probe in smooth_probes(field.u, rng, 3):
                vals = []
                for sgn in (1, -1):
                    u = field.u.copy()
                    u[probe] += sgn * 1e-4
                    args = (u, r_ba.u) if name == "ab" else (r_ab.u, u)
                    vals.append(obj.evaluate(*args)[0].total)
                numeric = (vals[0] - vals[1]) / 2e-4
                assert grads[name][probe] == pytest.approx(numeric, rel=1e-4, abs=1e-9)

    def test_non_finite_reported(self):
        g = np.zeros((3, 4, 4, 4))
        g[1, 2, 3, 0] = np.nan
        with pytest.raises(NumericalError, match=r"\(2, 3, 0\)"):
            check_finite(g, "gradient")
