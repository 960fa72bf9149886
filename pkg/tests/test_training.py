import csv

import numpy as np
import pytest
import torch

from joined.config import load_config
from joined.data_io import SyntheticSpec, generate_synthetic, load_dataset
from joined.nets import load_checkpoint
from joined.training import (
    TrainingError,
    soft_distance_peaks,
    soft_heatmap_coords,
    train_coarse,
    train_fine_loc,
    train_fine_seg,
)
from joined.targets import Coordinate, LandmarkAnnotation, gaussian_heatmap, make_distance_map


def tiny_config(tmp_path, **extra):
    overrides = dict(
        seed=3,
        base_width=4,
        decoder_start_width=8,
        coarse_resolution=64,
        seg_crop_size=64,
        loc_crop_size=32,
        sigma_divisor=20.0,
        coarse_epochs=3,
        fine_seg_epochs=2,
        fine_loc_epochs=2,
        tau0=1,
        tau1=2,
        batch_size=4,
        lr=1e-3,
        augment=False,
        jitter_px=4,
        out_dir=str(tmp_path / "run"),
        data_root=str(tmp_path / "data"),
    )
    overrides.update(extra)
    return load_config(None, overrides=overrides)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    manifest = generate_synthetic(SyntheticSpec(size=96, seed=5), 4, root)
    return load_dataset(manifest)


class TestSoftExtraction:
    def test_soft_coords_match_hard_on_gaussians(self):
        h = np.stack(
            [
                gaussian_heatmap((64, 64), Coordinate(20, 30), 2.0),
                gaussian_heatmap((64, 64), Coordinate(50, 10), 2.0),
            ]
        )
        coords = soft_heatmap_coords(torch.from_numpy(h)[None])
        got = coords[0].numpy() * 63.0
        np.testing.assert_allclose(got, [[20, 30], [50, 10]], atol=1.0)

    def test_soft_coords_differentiable(self):
        h = torch.rand(1, 2, 16, 16, requires_grad=True)
        soft_heatmap_coords(h).sum().backward()
        assert h.grad is not None and torch.isfinite(h.grad).all()

    def test_soft_peaks_recover_landmarks(self):
        annot = LandmarkAnnotation(od_center=Coordinate(12, 12), fovea=Coordinate(50, 48))
        d = make_distance_map((64, 64), annot)
        peaks = soft_distance_peaks(torch.from_numpy(d.values)[None, None])
        got = sorted((peaks[0] * 63.0).tolist())
        want = sorted([[12.0, 12.0], [50.0, 48.0]])
        np.testing.assert_allclose(got, want, atol=1.5)


class TestTrainCoarse:
    def test_schedule_and_artifacts(self, dataset, tmp_path):
        cfg = tiny_config(tmp_path)
        net, history = train_coarse(cfg, dataset, cfg.out_dir)
        assert [sorted(r.active) for r in history] == [["P"], ["D", "P"], ["D", "P", "S"]]
        assert all(np.isfinite(r.total) for r in history)
        with open(tmp_path / "run" / "coarse_loss.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "l_p", "l_d", "l_s", "total"]
        assert len(rows) == 4
        loaded = load_checkpoint(tmp_path / "run" / "jsdm")
        loaded.eval()
        net.eval()
        x = torch.rand(1, 3, 64, 64)
        with torch.no_grad():
            a, b = net(x), loaded(x)
        for t1, t2 in zip(a, b):
            assert torch.equal(t1, t2)

    def test_first_epoch_loss_deterministic(self, dataset, tmp_path):
        cfg_a = tiny_config(tmp_path, coarse_epochs=1, out_dir=str(tmp_path / "a"))
        cfg_b = tiny_config(tmp_path, coarse_epochs=1, out_dir=str(tmp_path / "b"))
        _, hist_a = train_coarse(cfg_a, dataset, cfg_a.out_dir)
        _, hist_b = train_coarse(cfg_b, dataset, cfg_b.out_dir)
        assert hist_a[0].total == pytest.approx(hist_b[0].total, abs=1e-7)

    def test_ablation_without_predictor_reports_only_active_terms(self, dataset, tmp_path):
        cfg = tiny_config(tmp_path, branches="DS")
        _, history = train_coarse(cfg, dataset, cfg.out_dir)
        assert [sorted(r.active) for r in history] == [[], ["D"], ["D", "S"]]
        assert all(r.l_p == 0.0 for r in history)
        assert history[1].l_d > 0.0 and history[1].l_s == 0.0
        assert history[2].l_s > 0.0
        assert history[2].total == pytest.approx(
            cfg.lambda0 * history[2].l_d + cfg.lambda1 * history[2].l_s, abs=1e-9
        )

    def test_ablation_segmentor_only(self, dataset, tmp_path):
        cfg = tiny_config(tmp_path, branches="S")
        _, history = train_coarse(cfg, dataset, cfg.out_dir)
        assert [sorted(r.active) for r in history] == [[], [], ["S"]]
        assert history[2].total == pytest.approx(cfg.lambda1 * history[2].l_s, abs=1e-9)

    def test_consistency_modes_run(self, dataset, tmp_path):
        for mode in ("both", "detector", "none"):
            cfg = tiny_config(
                tmp_path, consistency_backprop=mode, out_dir=str(tmp_path / f"m_{mode}")
            )
            _, history = train_coarse(cfg, dataset, cfg.out_dir)
            assert np.isfinite(history[-1].total)

    def test_non_finite_input_aborts_with_batch_id(self, dataset, tmp_path):
        cfg = tiny_config(tmp_path)
        poisoned = [d for d in dataset]
        bad = poisoned[0]
        # nan patch inside the field of view so preprocessing still succeeds
        bad_image = bad.image.copy().astype(np.float32)
        bad_image[40:60, 40:60, :] = np.nan
        from joined.data_io import FundusSample

        poisoned[0] = FundusSample(
            image_id=bad.image_id, image=bad_image, mask=bad.mask, annot=bad.annot
        )
        with pytest.raises(TrainingError, match="batch 0"):
            train_coarse(cfg, poisoned, cfg.out_dir)


class TestFineStages:
    def test_fine_seg_teacher_forcing_gt_conditioning(self, dataset, tmp_path):
        cfg = tiny_config(tmp_path)
        net, history = train_fine_seg(cfg, dataset, cfg.out_dir, coarse_net=None)
        assert len(history) == 2
        assert (tmp_path / "run" / "fine_seg_loss.csv").exists()
        assert load_checkpoint(tmp_path / "run" / "fsm") is not None

    def test_fine_seg_with_coarse_conditioning(self, dataset, tmp_path):
        cfg = tiny_config(tmp_path, coarse_epochs=1)
        coarse_net, _ = train_coarse(cfg, dataset, cfg.out_dir)
        _, history = train_fine_seg(cfg, dataset, cfg.out_dir, coarse_net=coarse_net)
        assert np.isfinite(history[-1])

    def test_fine_seg_predicted_crop_centers(self, dataset, tmp_path):
        cfg = tiny_config(tmp_path, coarse_epochs=1, teacher_forcing=False)
        coarse_net, _ = train_coarse(cfg, dataset, cfg.out_dir)
        _, history = train_fine_seg(cfg, dataset, cfg.out_dir, coarse_net=coarse_net)
        assert np.isfinite(history[-1])

    def test_fine_loc_artifacts(self, dataset, tmp_path):
        cfg = tiny_config(tmp_path)
        net, history = train_fine_loc(cfg, dataset, cfg.out_dir, coarse_net=None)
        assert len(history) == 2
        with open(tmp_path / "run" / "fine_loc_loss.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "l_reg", "l_heat", "total"]
        assert load_checkpoint(tmp_path / "run" / "flm") is not None

    def test_fine_seg_requires_masks(self, dataset, tmp_path):
        cfg = tiny_config(tmp_path)
        from joined.data_io import FundusSample

        no_masks = [
            FundusSample(image_id=s.image_id, image=s.image, mask=None, annot=s.annot)
            for s in dataset
        ]
        with pytest.raises(TrainingError):
            train_fine_seg(cfg, no_masks, cfg.out_dir)
