"""Smoke test for the tumorseg_py extension module."""

import tempfile
from pathlib import Path

import tumorseg_py as ts


def main():
    assert len(ts.variants()) == 8
    assert ts.LESION_PENALTY_MM == 374.0

    vol, labels = ts.Volume.phantom(shape=[16, 16, 16], seed=3)
    vol = vol.normalized()
    gt = ts.Masks.from_labels(labels, [16, 16, 16])
    assert gt.is_nested() and gt.voxel_counts()[2] > 0
    print(vol, gt)

    # Losses: perfect prediction gives a near-zero loss.
    y = [float(v) for v in gt.et + gt.tc + gt.wt]
    value, grad = ts.loss(y, y, 3)
    assert value < 1e-4 and len(grad) == len(y), value

    # Metrics on identical masks.
    assert ts.dice_score(gt.wt, gt.wt, [16, 16, 16]) == 1.0
    assert ts.hd95(gt.wt, gt.wt, [16, 16, 16]) == 0.0
    report = ts.evaluate_case(gt, gt, "phantom")
    assert report["scores"]["WT"]["lw_dice"] == 1.0

    # A short training run, then inference and post-processing.
    config = {
        "variant_name": "unet3d",
        "model": {"depth": 2, "base_channels": 4},
        "patch_size": [16, 16, 16],
        "max_epochs": 3,
    }
    model, history = ts.train_model([(vol, labels)], config=config)
    assert len(history) >= 3 and all(r["loss"] > 0 for r in history)
    pred = model.predict(vol, patch_size=[16, 16, 16])
    clean = ts.postprocess(pred, {"min_component": {"et": 3, "tc": 3, "wt": 3}})
    assert clean.is_nested() and clean.shape == [16, 16, 16]

    with tempfile.TemporaryDirectory() as tmp:
        ckpt = Path(tmp) / "m.ckpt"
        model.save(str(ckpt))
        again = ts.Model.load(str(ckpt))
        assert again.parameter_count() == model.parameter_count()
        ens = ts.ensemble_predict({"groups": [[str(ckpt)]]}, vol, patch_size=[16, 16, 16])
        assert ens == pred
        clean.save(tmp, "phantom")
        assert ts.Masks.load(tmp, "phantom") == clean

    assert ts.majority_vote([pred, pred, gt]) == pred
    print("history:", [round(r["loss"], 4) for r in history])
    print("smoke test passed")


if __name__ == "__main__":
    main()
