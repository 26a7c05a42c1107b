import gzip
import struct

import numpy as np
import pytest

from bsff.data import Dataset, dataset_available


def pytest_configure(config):
    config.addinivalue_line("markers", "dataset: needs real dataset files")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One line per acceptance criterion at the end of the run."""
    lines = []
    for outcome in ("passed", "failed", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            if getattr(rep, "when", "call") != "call" and outcome != "skipped":
                continue
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py" in nodeid:
                name = nodeid.split("::")[-1]
                detail = ""
                if outcome == "skipped" and rep.longrepr:
                    detail = f"  ({rep.longrepr[-1]})"
                lines.append((name, outcome.upper(), detail))
    if lines:
        tw = terminalreporter
        tw.write_sep("-", "acceptance criteria")
        for name, outcome, detail in sorted(set(lines)):
            tw.write_line(f"{outcome:>7}  {name}{detail}")


def synthetic_images(n, seed, ncat=4, hw=12, cin=1):
    """Class-structured noisy images: bars and diagonals, one per class."""
    rng = np.random.default_rng(seed)
    ys = rng.integers(0, ncat, size=n)
    xs = rng.random((n, cin, hw, hw)).astype(np.float32) * 0.3
    eye = np.eye(hw - 4, dtype=np.float32)
    for i, y in enumerate(ys):
        c = i % cin
        amp = 0.5 + 0.05 * (y // 4)
        if y % 4 == 0:
            xs[i, c, 2:hw - 2, hw // 2 - 1:hw // 2 + 1] += amp
        elif y % 4 == 1:
            xs[i, c, hw // 2 - 1:hw // 2 + 1, 2:hw - 2] += amp
        elif y % 4 == 2:
            xs[i, c, 2:hw - 2, 2:hw - 2] += eye * amp
        else:
            xs[i, c, 2:hw - 2, 2:hw - 2] += eye[::-1] * amp
    return Dataset(np.clip(xs, 0.0, 1.0), ys)


@pytest.fixture
def toy_data():
    return synthetic_images(512, 0), synthetic_images(256, 1)


def write_idx_pair(dirpath, images, labels, prefix="train", gz=False):
    """Write a valid IDX image/label pair; images uint8 (N, H, W)."""
    n, h, w = images.shape
    img_path = dirpath / f"{prefix}-images-idx3-ubyte"
    lab_path = dirpath / f"{prefix}-labels-idx1-ubyte"
    img_bytes = struct.pack(">IIII", 0x803, n, h, w) + images.astype(np.uint8).tobytes()
    lab_bytes = struct.pack(">II", 0x801, n) + labels.astype(np.uint8).tobytes()
    if gz:
        img_path = img_path.with_name(img_path.name + ".gz")
        lab_path = lab_path.with_name(lab_path.name + ".gz")
        img_bytes = gzip.compress(img_bytes)
        lab_bytes = gzip.compress(lab_bytes)
    img_path.write_bytes(img_bytes)
    lab_path.write_bytes(lab_bytes)
    return img_path, lab_path


def make_fake_mnist_root(tmp_path, n_train=96, n_test=48, seed=0, hw=28):
    """A directory laid out like a real data root, with synthetic digits."""
    root = tmp_path / "dataroot"
    sub = root / "mnist"
    sub.mkdir(parents=True)
    train = synthetic_images(n_train, seed, ncat=10, hw=hw)
    test = synthetic_images(n_test, seed + 1, ncat=10, hw=hw)
    write_idx_pair(sub, (train.images[:, 0] * 255).astype(np.uint8), train.labels,
                   "train")
    write_idx_pair(sub, (test.images[:, 0] * 255).astype(np.uint8), test.labels,
                   "t10k")
    return root


def require_dataset(name):
    return pytest.mark.skipif(
        not dataset_available(name),
        reason=f"{name} files not present under the data root "
               f"(set BSFF_DATA_ROOT; see README)")
