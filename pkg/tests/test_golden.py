"""Byte-for-byte golden files (regenerate with ``python3 tests/golden_cases.py``)."""

import golden_cases as gc

from vcfseq.model import Checkpoint
from vcfseq.render import decode_pgm
from vcfseq.volume import decode_volume, encode_volume


def golden(name):
    return (gc.GOLDEN / name).read_bytes()


def test_volume_golden():
    data = gc.volume_bytes()
    assert data == golden("volume.vsq")
    assert encode_volume(decode_volume(data)) == data


def test_manifest_golden(bench42):
    assert gc.manifest_bytes(bench42.root) == golden("manifest_seed42.tsv")


def test_checkpoint_golden(tmp_path):
    assert gc.checkpoint_bytes() == golden("tiny_seed0.ckpt")
    (tmp_path / "c.ckpt").write_bytes(golden("tiny_seed0.ckpt"))
    assert Checkpoint.load(tmp_path / "c.ckpt").to_bytes() == golden("tiny_seed0.ckpt")


def test_overlay_golden(bench42):
    data = gc.overlay_bytes(bench42)
    assert data == golden("overlay_phantom0.pgm")
    img = decode_pgm(data)
    assert img.shape == (220, 56)
