import hashlib
import json
import struct

import numpy as np
import pytest

from vitprune.arch import ArchSpec
from vitprune.config import RunConfig, apply_overrides, config_from_dict, load_config
from vitprune.data import (CIFAR_MEAN, CIFAR_STD, load_cifar10_bin, parse_cifar10_bytes, raw_pixels,
                           synth_dataset, write_cifar10_bin)
from vitprune.errors import ConfigError, StaleArtifactError, ValidationError
from vitprune.importance import build_proxy, score_model
from vitprune.model import init_model, predict_logits
from vitprune.persist import (CKPT_MAGIC, FormatError, checkpoint_bytes, file_digest, load_checkpoint,
                              load_recipe, load_table, parse_table, read_checkpoint, save_checkpoint,
                              save_recipe, save_table, table_text)
from vitprune.surgeon import prune_channels


def tiny(seed=0, depth=2):
    return init_model(ArchSpec.vit(8, 4, 8, depth, 2, 2.0, 3), seed=seed, std=0.5)


# -- CIFAR-10 binary ----------------------------------------------------------------------------

def _records(rng, n):
    pixels = rng.integers(0, 256, (n, 3, 32, 32), dtype=np.uint8)
    labels = rng.integers(0, 10, n)
    return pixels, labels


def test_cifar_layout_by_hand(tmp_path, rng):
    pixels, labels = _records(rng, 3)
    buf = b"".join(bytes([labels[i]]) + pixels[i].tobytes() for i in range(3))
    (tmp_path / "b.bin").write_bytes(buf)
    ds = load_cifar10_bin(tmp_path / "b.bin")
    assert ds.images.shape == (3, 3, 32, 32) and list(ds.labels) == list(labels)
    # red channel of pixel (0, 1) of the second image is byte 1 + 3073 + 1
    expect = (buf[3073 + 2] / 255.0 - CIFAR_MEAN[0]) / CIFAR_STD[0]
    assert ds.images[1, 0, 0, 1] == pytest.approx(expect, abs=1e-15)
    np.testing.assert_array_equal(raw_pixels(ds), pixels)


def test_cifar_write_read_round_trip(tmp_path, rng):
    pixels, labels = _records(rng, 5)
    write_cifar10_bin(tmp_path / "a.bin", pixels, labels)
    write_cifar10_bin(tmp_path / "c.bin", pixels[:2], labels[:2])
    ds = load_cifar10_bin([tmp_path / "a.bin", tmp_path / "c.bin"], split="eval")
    assert len(ds) == 7 and ds.split == "eval" and ds.num_classes == 10
    np.testing.assert_array_equal(raw_pixels(ds)[5:], pixels[:2])


def test_cifar_errors(tmp_path, rng):
    with pytest.raises(ValueError, match="multiple"):
        parse_cifar10_bytes(b"\x00" * 3074)
    with pytest.raises(ValueError, match="label byte"):
        parse_cifar10_bytes(b"\x0b" + b"\x00" * 3072)
    with pytest.raises(FileNotFoundError):
        load_cifar10_bin(tmp_path / "missing.bin")
    with pytest.raises(ValueError):
        write_cifar10_bin(tmp_path / "x.bin", np.zeros((1, 3, 32, 32)), [0])


def test_class_subset_relabels(rng):
    pixels, labels = _records(rng, 40)
    from vitprune.data import Dataset

    ds = Dataset(pixels.astype(float), labels, 10, (0.0,) * 3, (1.0,) * 3)
    sub = ds.subset_classes([7, 2])
    assert set(sub.labels) <= {0, 1}
    assert np.sum(sub.labels == 0) == np.sum(labels == 7) and np.sum(sub.labels == 1) == np.sum(labels == 2)
    a, b = sub.split_at(3)
    assert len(a) == 3 and len(b) == len(sub) - 3 and b.split == "eval"


def test_synthetic_data_is_seeded():
    a, b = synth_dataset(10, 8, 3, 4, seed=3), synth_dataset(10, 8, 3, 4, seed=3)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, synth_dataset(10, 8, 3, 4, seed=4).images)
    teacher = tiny()
    t = synth_dataset(10, 8, 3, 3, seed=3, teacher=teacher)
    np.testing.assert_array_equal(t.labels, predict_logits(teacher, t.images).argmax(1))
    with pytest.raises(ValueError):
        synth_dataset(10, 8, 3, 4, teacher=teacher)


# -- checkpoints -------------------------------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_checkpoint_round_trip(tmp_path, dtype):
    m = init_model(ArchSpec.vit(8, 4, 8, 2, 2, 2.0, 3), seed=1, dtype=dtype)
    save_checkpoint(m, tmp_path / "m.ckpt", {"note": "x"})
    back, meta = load_checkpoint(tmp_path / "m.ckpt", with_meta=True)
    assert meta == {"note": "x"} and back.spec == m.spec and back.fingerprint() == m.fingerprint()
    assert back.dtype == dtype
    assert not list(tmp_path.glob("*.lock"))


def test_checkpoint_layout_by_hand():
    m = tiny()
    buf = checkpoint_bytes(m)
    assert buf[:8] == CKPT_MAGIC
    version, hlen = struct.unpack("<II", buf[8:16])
    header = json.loads(buf[16:16 + hlen])
    assert version == 1 and hashlib.sha256(buf[:-32]).digest() == buf[-32:]
    e = next(t for t in header["tensors"] if t["name"] == "head.weight")
    start = 16 + hlen + e["offset"]
    arr = np.frombuffer(buf[start:start + e["nbytes"]], "<f8").reshape(e["shape"])
    np.testing.assert_array_equal(arr, m.weights["head.weight"])
    assert checkpoint_bytes(m) == buf


def test_checkpoint_corruption_detected():
    buf = bytearray(checkpoint_bytes(tiny()))
    buf[200] ^= 1
    with pytest.raises(FormatError, match="checksum"):
        read_checkpoint(bytes(buf))
    with pytest.raises(FormatError, match="magic"):
        read_checkpoint(b"junk" * 20)
    newer = bytearray(checkpoint_bytes(tiny()))
    newer[8:12] = struct.pack("<I", 9)
    with pytest.raises(FormatError, match="version"):
        read_checkpoint(bytes(newer))


def test_checkpoint_with_bad_shapes_rejected():
    m = tiny()
    w = dict(m.weights)
    w["head.bias"] = np.zeros(4)
    with pytest.raises(ValidationError) as err:
        read_checkpoint(_forge(m, w))
    assert not isinstance(err.value, FormatError) and "head.bias" in str(err.value)


def _forge(m, weights):
    """A checkpoint with correct framing but tensors that disagree with the spec."""
    entries, blobs, off = [], [], 0
    for name, w in weights.items():
        data = w.astype("<f8").tobytes()
        entries.append({"name": name, "shape": list(w.shape), "dtype": "<f8", "offset": off, "nbytes": len(data)})
        blobs.append(data)
        off += len(data)
    header = json.dumps({"spec": m.spec.to_dict(), "tensors": entries, "meta": {}}).encode()
    body = CKPT_MAGIC + struct.pack("<II", 1, len(header)) + header + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


# -- tables and recipes ------------------------------------------------------------------------

def test_table_round_trip(tmp_path):
    m = tiny()
    t = score_model(m, build_proxy(np.random.default_rng(0).standard_normal((8, 3, 8, 8)), 8))
    save_table(t, tmp_path / "t.json")
    back = load_table(tmp_path / "t.json", m)
    assert back.channel_scores == t.channel_scores and back.block_scores == t.block_scores and back.meta == t.meta
    assert table_text(back) == table_text(t)
    with pytest.raises(StaleArtifactError):
        load_table(tmp_path / "t.json", tiny(seed=3))
    assert load_table(tmp_path / "t.json", tiny(seed=3), allow_stale=True).meta == t.meta


def test_table_format_errors():
    for text in ("not json", "[]", '{"format": "other"}', '{"format": "VITPRUNE-IMPORTANCE", "version": 7}'):
        with pytest.raises(FormatError):
            parse_table(text)


def test_recipe_files(tmp_path):
    m = tiny()
    t = score_model(m, build_proxy(np.random.default_rng(0).standard_normal((8, 3, 8, 8)), 8), blocks=False)
    _, recipe = prune_channels(m, t, ratio=0.25)
    save_recipe(recipe, tmp_path / "r.txt")
    assert load_recipe(tmp_path / "r.txt", m) == recipe
    with pytest.raises(StaleArtifactError):
        load_recipe(tmp_path / "r.txt", tiny(depth=3))
    (tmp_path / "bad.txt").write_text("garbage\n")
    with pytest.raises(FormatError):
        load_recipe(tmp_path / "bad.txt")


def test_file_digest(tmp_path):
    (tmp_path / "f").write_bytes(b"abc")
    assert file_digest(tmp_path / "f") == hashlib.sha256(b"abc").hexdigest()


# -- configuration --------------------------------------------------------------------------

def test_config_defaults_and_yaml_round_trip(tmp_path):
    cfg = RunConfig()
    (tmp_path / "c.yaml").write_text(cfg.to_yaml())
    assert load_config(tmp_path / "c.yaml") == cfg
    assert cfg.score.proxy_size == 200 and cfg.data.labels == "labeler"


def test_config_rejects_unknown_and_mistyped_keys(tmp_path):
    with pytest.raises(ConfigError, match="train.alhpa"):
        config_from_dict({"train": {"alhpa": 1}})
    with pytest.raises(ConfigError, match="model.depth"):
        config_from_dict({"model": {"depth": "four"}})
    with pytest.raises(ConfigError):
        config_from_dict({"model": {"depth": 2.5}})
    with pytest.raises(ConfigError):
        config_from_dict({"train": {"augment": 1}})
    (tmp_path / "bad.yaml").write_text("model: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


def test_overrides():
    cfg = apply_overrides(RunConfig(), ["train.alpha=0.25", "model.depth=6", "prune.ratio=0.5", "data.classes=[0, 3]"])
    assert cfg.train.alpha == 0.25 and cfg.model.depth == 6 and cfg.prune.ratio == 0.5 and cfg.data.classes == [0, 3]
    assert RunConfig().train.alpha == 1.0
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["train.alpha"])
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["nosuch.key=1"])
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["train.alpha.x=1"])


def test_exponent_floats_without_a_dot(tmp_path):
    cfg = apply_overrides(RunConfig(), ["train.lr=1e-3", "prune.ratio=5e-1", "data.labeler=2e5.ckpt"])
    assert cfg.train.lr == 1e-3 and cfg.prune.ratio == 0.5 and cfg.data.labeler == "2e5.ckpt"
    (tmp_path / "c.yaml").write_text("train:\n  lr: 3e-4\n")
    assert load_config(tmp_path / "c.yaml").train.lr == 3e-4
