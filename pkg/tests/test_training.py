import numpy as np
import pytest

from humanvol.autodiff import load_checkpoint, save_checkpoint
from humanvol.evaluation import evaluate_item, summarize, threshold_occupancy, write_report
from humanvol.losses import LossWeights
from humanvol.network import to_batch
from humanvol.synth import build_corpus, load_corpus
from humanvol.training import (
    CheckpointMismatch,
    ConfigError,
    LossLog,
    TrainConfig,
    batch_indices,
    load_state,
    new_state,
    parse_config,
    read_loss_log,
    save_state,
    split_corpus,
    stage2_step,
    train,
)

DIMS = (16, 24, 16)


@pytest.fixture(scope="module")
def items(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    build_corpus(root, 3, 2, DIMS, seed=5)
    return load_corpus(root)


def small_config(**kw):
    base = dict(scale_divisor=8, batch=2, stage1_iters=2, stage2_iters=1, holdout_bodies=1, seed=2)
    return TrainConfig(**{**base, **kw})


class TestConfig:
    def test_parse(self):
        cfg = parse_config("scale_divisor = 8\nfusion_mode = latent_concat  # ablation\n\nlr=1e-3\n")
        assert (cfg.scale_divisor, cfg.fusion_mode, cfg.lr) == (8, "latent_concat", 1e-3)
        assert cfg.lambda_fs == 0.1 and cfg.lambda_n == 0.01

    @pytest.mark.parametrize("text", ["learning_rate = 1", "batch", "batch = two", "fusion_mode = none",
                                      "scale_divisor = 3", "batch = 0", "stage1_iters = -1"])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_render_round_trip(self):
        cfg = small_config(fusion_mode="coarsest_only", gamma=0.6)
        assert parse_config(cfg.render()) == cfg


class TestSplit:
    def test_holdout_whole_bodies(self, items):
        train_items, held = split_corpus(items, 1)
        assert len(held) == 2 and len(train_items) == 4
        assert not {it.seed for it in held} & {it.seed for it in train_items}

    def test_cannot_hold_out_everything(self, items):
        with pytest.raises(ValueError):
            split_corpus(items, 3)

    def test_batches_depend_on_iteration_only(self):
        np.testing.assert_array_equal(batch_indices(1, 7, 10, 4), batch_indices(1, 7, 10, 4))
        assert not np.array_equal(batch_indices(1, 7, 10, 4), batch_indices(1, 8, 10, 4))


class TestTraining:
    def test_history_and_loss_log(self, items, tmp_path):
        cfg = small_config()
        with LossLog(tmp_path / "loss.csv") as sink:
            state = train(new_state(cfg), items, cfg, on_row=sink)
        rows = read_loss_log(tmp_path / "loss.csv")
        assert [r["iteration"] for r in rows] == [1, 2, 3] == [r["iteration"] for r in state.history]
        assert rows == state.history
        for r in rows:
            w = cfg.weights
            expected = r["L_V"] + w.lambda_fs * r["L_FS"] + w.lambda_ss * r["L_SS"] + w.lambda_n * r["L_N"]
            assert r["L"] == pytest.approx(expected, rel=1e-6)

    def test_resume_is_bit_exact(self, items, tmp_path):
        cfg = small_config(stage1_iters=2, stage2_iters=1)
        straight = train(new_state(cfg), items, cfg)
        part = train(new_state(cfg), items, small_config(stage1_iters=1, stage2_iters=0), stages=(1,))
        save_state(tmp_path / "part.dhck", part)
        resumed = train(load_state(tmp_path / "part.dhck", cfg), items, cfg)
        assert resumed.iteration == straight.iteration == 3
        assert resumed.history == straight.history[1:]
        for p, q in zip(straight.net.params, resumed.net.params):
            assert np.array_equal(p.data, q.data), p.name

    def test_zero_iterations_leave_checkpoint_unchanged(self, items, tmp_path):
        cfg = small_config()
        save_state(tmp_path / "a.dhck", train(new_state(cfg), items, cfg))
        again = train(load_state(tmp_path / "a.dhck", cfg), items, cfg)
        assert again.history == []
        save_state(tmp_path / "b.dhck", again)
        assert (tmp_path / "a.dhck").read_bytes() == (tmp_path / "b.dhck").read_bytes()

    def test_only_volume_loss_leaves_refiner_untouched(self, items):
        """With every weight but the volume term at zero, R receives zero gradient."""
        cfg = small_config()
        state = new_state(cfg)
        state.net.params.zero_grad()
        total, _ = stage2_step(state.net, to_batch(items[:2]), LossWeights(0.0, 0.0, 0.0, 0.7))
        total.backward()
        refiner = state.net.params.select("r/")
        assert refiner and all(not np.any(p.grad) for p in refiner)
        assert any(np.any(p.grad) for p in state.net.params.select("h/"))

    def test_stage2_rejects_checkpoint_without_refiner(self, items, tmp_path):
        cfg = small_config()
        save_state(tmp_path / "full.dhck", new_state(cfg))
        arrays = {k: v for k, v in load_checkpoint(tmp_path / "full.dhck").items() if not k.startswith("r/")}
        save_checkpoint(tmp_path / "no_r.dhck", arrays)
        with pytest.raises(CheckpointMismatch, match="refiner"):
            load_state(tmp_path / "no_r.dhck", cfg, require_refiner=True)

    def test_checkpoint_config_mismatch(self, tmp_path):
        save_state(tmp_path / "c.dhck", new_state(small_config()))
        with pytest.raises(CheckpointMismatch):
            load_state(tmp_path / "c.dhck", small_config(fusion_mode="coarsest_only"))


class TestEvaluation:
    @pytest.mark.parametrize("threshold,expected", [(0.0, 1.0), (1.0, 0.0)])
    def test_threshold_extremes(self, threshold, expected):
        soft = np.array([0.0, 1e-30, 0.3, 0.5, 0.999999, 1.0], np.float32)
        assert np.all(threshold_occupancy(soft, threshold) == expected)

    def test_threshold_midpoint(self):
        np.testing.assert_array_equal(threshold_occupancy(np.array([0.49, 0.5, 0.51]), 0.5), [0, 1, 1])

    def test_ground_truth_scores_perfectly(self, items, tmp_path):
        rows = [evaluate_item(it, occupancy=it.occupancy, normal=it.normal, normal_raw=it.normal) for it in items]
        mean = write_report(tmp_path / "report.csv", rows)
        assert mean["iou"] == 1.0
        # renormalising unit vectors leaves only rounding error
        assert abs(mean["cos_refined"]) < 1e-12 and abs(mean["l2_refined"]) < 1e-6
        lines = (tmp_path / "report.csv").read_text().splitlines()
        assert len(lines) == len(items) + 2 and lines[-1].startswith("mean,")

    def test_summary_skips_missing_values(self):
        rows = [{"iou": 0.5, "best_shift": 1, "baseline_iou": 0.4, "sil_loss": float("nan"),
                 "cos_refined": 0.1, "cos_unrefined": 0.2, "l2_refined": 0.3, "l2_unrefined": 0.4},
                {"iou": 0.7, "best_shift": -1, "baseline_iou": 0.6, "sil_loss": 1.0,
                 "cos_refined": 0.3, "cos_unrefined": 0.4, "l2_refined": 0.5, "l2_unrefined": 0.6}]
        mean = summarize(rows)
        assert mean["iou"] == pytest.approx(0.6) and mean["sil_loss"] == 1.0
