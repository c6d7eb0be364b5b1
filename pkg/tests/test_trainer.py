import hashlib

import numpy as np
import pytest
import torch

from agestyle.dataset import FaceRecord, Manifest, ToySpec, generate_toy, load_image
from agestyle.losses import LossWeights, NonFiniteLossError
from agestyle.trainer import (
    LOG_COLUMNS,
    Batch,
    CheckpointError,
    EmptyGroupError,
    ImageBank,
    PairSampler,
    TrainConfig,
    TrainState,
    Translator,
    discriminator_step,
    generator_losses,
    generator_step,
    load_checkpoint,
    read_loss_log,
    sample_pair,
    save_checkpoint,
    train,
    train_step,
    translate,
)

TINY = dict(image_size=64, base_channels=4, max_channels=16, batch_size=2, checkpoint_every=0)

# 10k draws over 4 equally likely groups; chi-square critical value, 3 dof, p = 0.001
CHI2_CRIT = 16.266


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    return generate_toy(ToySpec(image_size=64, samples_per_group=3, seed=1), tmp_path_factory.mktemp("toy"))


@pytest.fixture(scope="module")
def bank(toy):
    return ImageBank(toy, 64)


def config(**kw):
    return TrainConfig(**{**TINY, **kw})


def fixed_batch(bank, seed=0, size=2):
    rng = np.random.default_rng(seed)
    a, b = PairSampler(bank.manifest).draw_batch(rng, size)
    return Batch.from_bank(bank, a, b)


def param_hash(module):
    h = hashlib.sha256()
    for p in module.parameters():
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def fake_manifest(counts):
    recs = []
    for g, n in enumerate(counts):
        recs += [FaceRecord(f"g{g}_{i}.png", (15, 35, 45, 55)[g]) for i in range(n)]
    return Manifest(tuple(recs))


class TestSampling:
    def test_target_groups_uniform(self):
        # heavily imbalanced records, uniform target groups
        m = fake_manifest((70, 20, 7, 3))
        sampler = PairSampler(m)
        rng = np.random.default_rng(0)
        counts = np.zeros(4)
        for _ in range(10_000):
            _, b = sampler.draw(rng)
            counts[m.records[b].group.index] += 1
        freq = counts / counts.sum()
        assert np.all(np.abs(freq - 0.25) <= 0.02)
        chi2 = ((counts - 2500) ** 2 / 2500).sum()
        assert chi2 < CHI2_CRIT

    def test_inputs_uniform_over_records(self):
        m = fake_manifest((70, 20, 7, 3))
        rng = np.random.default_rng(1)
        sampler = PairSampler(m)
        groups = np.bincount([m.records[sampler.draw(rng)[0]].group.index for _ in range(10_000)], minlength=4)
        np.testing.assert_allclose(groups / 10_000, [0.7, 0.2, 0.07, 0.03], atol=0.02)

    def test_single_record(self):
        m = fake_manifest((0, 1, 0, 0))
        rng = np.random.default_rng(0)
        for _ in range(5):
            a, b = sample_pair(m, rng)
            assert a is b

    def test_reproducible(self):
        m = fake_manifest((5, 5, 5, 5))
        s = PairSampler(m)
        a = s.draw_batch(np.random.default_rng(3), 20)
        b = s.draw_batch(np.random.default_rng(3), 20)
        assert a == b

    def test_empty_group_strict(self):
        with pytest.raises(EmptyGroupError):
            PairSampler(fake_manifest((3, 0, 2, 2)), strict=True)

    def test_empty_group_lenient(self, caplog):
        m = fake_manifest((3, 0, 2, 2))
        sampler = PairSampler(m)
        assert "no records" in caplog.text
        rng = np.random.default_rng(0)
        assert all(m.records[sampler.draw(rng)[1]].group.index != 1 for _ in range(200))


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.learning_rate, c.beta1, c.beta2) == (1e-4, 0.5, 0.99)
        assert (c.weights.lambda_rec, c.weights.lambda_id, c.weights.lambda_gp) == (0.01, 1e-4, 10.0)
        assert c.use_translated_target_cycle

    def test_flat_round_trip(self):
        c = config(learning_rate=3e-4, seed=9)
        c = TrainConfig.from_flat({**c.to_flat(), "lambda_rec": 0.5})
        assert TrainConfig.from_flat(c.to_flat()) == c
        assert c.weights == LossWeights(lambda_rec=0.5)

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_flat({"learnin_rate": 1e-3})

    @pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(beta1=1.0), dict(beta2=-0.1), dict(batch_size=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestSteps:
    def test_discriminator_update_leaves_generator_alone(self, bank):
        state = TrainState.initial(config())
        g0, d0 = param_hash(state.model.G), param_hash(state.model.D)
        discriminator_step(state, fixed_batch(bank))
        assert param_hash(state.model.G) == g0 and param_hash(state.model.D) != d0

    def test_generator_update_leaves_discriminator_alone(self, bank):
        state = TrainState.initial(config())
        g0, d0 = param_hash(state.model.G), param_hash(state.model.D)
        generator_step(state, fixed_batch(bank))
        assert param_hash(state.model.D) == d0 and param_hash(state.model.G) != g0

    def test_discriminator_overfits_fixed_batch(self, bank):
        state = TrainState.initial(config(learning_rate=1e-3))
        batch = fixed_batch(bank, size=4)
        totals = []
        for _ in range(6):
            adv, gp = discriminator_step(state, batch)
            totals.append(float(-adv + gp))
        drops = np.diff(totals)
        assert totals[-1] < totals[0]
        assert (drops > 0).sum() <= 1

    def test_generator_reduces_feature_matching_alone(self, bank):
        w = LossWeights(lambda_rec=0.0, lambda_id=0.0, lambda_gp=0.0)
        state = TrainState.initial(config(learning_rate=1e-3, weights=w))
        batch = fixed_batch(bank, size=4)
        fms = [float(generator_step(state, batch)[0]) for _ in range(6)]
        assert fms[-1] < fms[0]
        assert (np.diff(fms) > 0).sum() <= 1

    def test_step_counter(self, bank):
        state = TrainState.initial(config())
        for expected in (1, 2):
            state, report = train_step(state, fixed_batch(bank))
            assert state.step == expected
        assert report.total_D == pytest.approx(-report.adv + report.gp)
        assert report.total_G == pytest.approx(report.fm + 0.01 * report.rec + 1e-4 * report.id)

    def test_non_finite_named(self, bank):
        state = TrainState.initial(config())
        batch = fixed_batch(bank)
        batch.x_a = batch.x_a.clone()
        batch.x_a[0, 0, 0, 0] = float("nan")
        with pytest.raises(NonFiniteLossError, match="adv.*step 0"):
            train_step(state, batch)

    def test_cycle_variants_differ(self, bank):
        state = TrainState.initial(config())
        batch = fixed_batch(bank)
        with torch.no_grad():
            translated = generator_losses(state.model, batch, translated_target_cycle=True)
            plain = generator_losses(state.model, batch, translated_target_cycle=False)
        fm, rec, id_ = translated
        # only the back-translation's style differs, so only rec changes
        assert rec != plain[1]
        torch.testing.assert_close(fm, plain[0])
        torch.testing.assert_close(id_, plain[2])


class TestTrainLoop:
    def test_zero_steps(self, toy, tmp_path):
        state = train(config(steps=0), toy, out_dir=tmp_path)
        assert state.step == 0
        assert (tmp_path / "checkpoint_final.pt").exists()
        assert (tmp_path / "losses.csv").read_text().strip() == ",".join(LOG_COLUMNS)

    def test_log_and_periodic_checkpoints(self, toy, bank, tmp_path):
        train(config(steps=4, checkpoint_every=2), toy, out_dir=tmp_path, bank=bank)
        rows = read_loss_log(tmp_path / "losses.csv")
        assert [r["step"] for r in rows] == [0, 1, 2, 3]
        assert list(rows[0]) == list(LOG_COLUMNS)
        assert {p.name for p in tmp_path.glob("*.pt")} == {"checkpoint_2.pt", "checkpoint_4.pt", "checkpoint_final.pt"}

    def test_same_seed_same_log(self, toy, bank):
        a = train(config(steps=3, seed=4), toy, bank=bank).history
        b = train(config(steps=3, seed=4), toy, bank=bank).history
        c = train(config(steps=3, seed=5), toy, bank=bank).history
        assert a == b and a != c

    def test_resume_matches_uninterrupted(self, toy, bank, tmp_path):
        full = train(config(steps=10, seed=2), toy, out_dir=tmp_path / "full", bank=bank)
        train(config(steps=5, seed=2), toy, out_dir=tmp_path / "part", bank=bank)
        resumed = train(config(steps=10, seed=2), toy, out_dir=tmp_path / "part",
                        resume=tmp_path / "part" / "checkpoint_final.pt", bank=bank)
        assert resumed.step == 10
        a, b = read_loss_log(tmp_path / "full" / "losses.csv"), read_loss_log(tmp_path / "part" / "losses.csv")
        assert len(a) == len(b) == 10
        for ra, rb in zip(a, b):
            for k in LOG_COLUMNS:
                assert ra[k] == pytest.approx(rb[k], abs=1e-5)
        for pa, pb in zip(full.model.parameters(), resumed.model.parameters()):
            torch.testing.assert_close(pa, pb, atol=1e-6, rtol=0)

    def test_resume_rejects_changed_config(self, toy, bank, tmp_path):
        state = train(config(steps=1), toy, bank=bank)
        with pytest.raises(ValueError, match="resume"):
            train(config(steps=2, learning_rate=5e-4), toy, resume=state, bank=bank)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        state = TrainState.initial(config(seed=3))
        state.step = 7
        path = save_checkpoint(state, tmp_path / "c.pt")
        back = load_checkpoint(path)
        assert back.step == 7 and back.config == state.config
        assert param_hash(back.model.G) == param_hash(state.model.G)
        assert back.rng.integers(1 << 30) == state.rng.integers(1 << 30)

    def test_corrupt(self, tmp_path):
        bad = tmp_path / "bad.pt"
        bad.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)

    def test_wrong_format(self, tmp_path):
        torch.save({"format": "other"}, tmp_path / "x.pt")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.pt")

    def test_missing_weights(self, tmp_path):
        payload = TrainState.initial(config()).to_dict()
        del payload["generator"]
        torch.save(payload, tmp_path / "x.pt")
        with pytest.raises(CheckpointError, match="corrupt"):
            load_checkpoint(tmp_path / "x.pt")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "none.pt")


class TestTranslate:
    def test_shape_and_determinism(self, toy, tmp_path):
        state = TrainState.initial(config())
        path = save_checkpoint(state, tmp_path / "c.pt")
        x, t = load_image(toy.records[0].image_path), load_image(toy.records[-1].image_path)
        y1, y2 = translate(path, x, t), translate(path, x, t)
        assert y1.shape == x.shape
        assert np.array_equal(y1, y2)
        np.testing.assert_array_equal(translate(state, x, t), y1)

    def test_batched(self, toy):
        tr = Translator(TrainState.initial(config()).model)
        xs = np.stack([load_image(r.image_path) for r in toy.records[:3]])
        ts = np.stack([load_image(r.image_path) for r in toy.records[-3:]])
        joint = tr(xs, ts)
        assert joint.shape == xs.shape
        np.testing.assert_allclose(joint[1], tr(xs[1], ts[1]), atol=1e-5)
