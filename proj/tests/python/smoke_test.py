"""Binding smoke test: build, run, strip, serialize, and read data back."""

import math
import os
import sys
import tempfile

import numpy as np

import vigilnet


def clip_to_input(frames_u8):
    """(f, h, w) uint8 -> (h, w, f, 1) float32 in [0, 1]."""
    return (frames_u8.astype(np.float32) / 255.0).transpose(1, 2, 0)[..., None]


def main():
    model = vigilnet.build_model(spatial=32, seed=11)
    assert model.variant == "ours_early"
    assert model.spatial == 32 and model.frames == 10 and model.classes == 2
    assert not model.inference_only

    names = model.parameter_names()
    assert "stem.conv.weight" in names
    assert "classifier.weight" in names and "classifier.bias" in names
    assert vigilnet.count_params(model) > 0
    assert vigilnet.count_macs(model) > vigilnet.count_params(model)

    trace = vigilnet.shape_trace(model)
    assert trace[0]["op"] == "conv3d"
    assert trace[0]["input_dims"].startswith("32x32x10")

    assert vigilnet.scale_channels(32, 1.4) == 48
    assert vigilnet.scale_channels(16, 0.35) == 8

    rng = np.random.default_rng(0)
    clip = rng.random((32, 32, 10, 1), dtype=np.float32)
    logits = model.forward(clip)
    assert logits.shape == (2,)
    assert np.isfinite(logits).all()

    batch = np.stack([clip, clip * 0.5])
    batch_logits = model.forward(batch)
    assert batch_logits.shape == (2, 2)
    np.testing.assert_array_equal(batch_logits[0], logits)

    probs = model.predict(clip)
    assert len(probs) == 2
    assert math.isclose(sum(probs), 1.0, rel_tol=1e-5)

    stripped = vigilnet.strip_for_inference(model)
    assert stripped.inference_only and not stripped.bn_folded
    np.testing.assert_array_equal(stripped.forward(clip), logits)
    folded = vigilnet.strip_for_inference(model, fold_bn=True)
    assert folded.bn_folded
    np.testing.assert_array_equal(folded.forward(clip), logits)

    try:
        model.forward(np.zeros((3, 3), dtype=np.float32))
        raise AssertionError("rank-2 input must be rejected")
    except ValueError:
        pass

    records = vigilnet.generate_synthetic(6, seed=4, frames=10, height=48,
                                          width=64)
    assert len(records) == 6
    labels = [label for _, label in records]
    assert labels == [0, 1, 0, 1, 0, 1]
    frames0 = records[0][0]
    assert frames0.shape == (10, 48, 64) and frames0.dtype == np.uint8

    with tempfile.TemporaryDirectory() as tmp:
        rec_path = os.path.join(tmp, "records.ddr1")
        vigilnet.write_records(records, rec_path)
        back = vigilnet.read_records(rec_path)
        assert len(back) == len(records)
        for (a, la), (b, lb) in zip(records, back):
            assert la == lb
            np.testing.assert_array_equal(a, b)

        weights_path = os.path.join(tmp, "weights.dsw1")
        vigilnet.save_weights(model, weights_path)
        loaded = vigilnet.load_weights(weights_path)
        np.testing.assert_array_equal(loaded.forward(clip), logits)

        try:
            vigilnet.load_weights(os.path.join(tmp, "missing.dsw1"))
            raise AssertionError("missing file must raise")
        except OSError:
            pass

    acc = vigilnet.evaluate(model, records)
    assert 0.0 <= acc <= 1.0

    square = vigilnet.generate_synthetic(2, seed=9, frames=10, height=32,
                                         width=32)
    prediction = stripped.predict(clip_to_input(square[0][0]))
    assert 0.0 <= prediction[1] <= 1.0

    print("python smoke: all checks passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
