"""The deterministic synthetic benchmark used by the sweep command and the
acceptance experiments.

Layout under ``root``:

- ``train/``    K devices x receivers 0 and 1, clean, ``train_per_pair`` each
- ``test/``     K devices x unseen receiver 2, dynamic NLOS at ``test_snr_db``
- ``pretrain/`` a disjoint device population x receivers 0 and 1, clean, unlabeled
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

from .channel import derive_seed
from .datasets import MANIFEST_NAME, condition_ranges, generate_corpus, load_store
from .impairments import sample_device_profiles, sample_receiver_profiles


@dataclass(frozen=True)
class BenchmarkConfig:
    num_devices: int = 10
    spread: float = 1.0
    train_per_pair: int = 200
    test_per_device: int = 100
    test_snr_db: float = 20.0
    pretrain_devices: int = 8
    pretrain_per_pair: int = 100
    seed: int = 2024


@dataclass
class Benchmark:
    root: Path
    config: BenchmarkConfig

    def train(self, receiver_id: int):
        return load_store(self.root / "train").filter(receiver_id=receiver_id)

    def test(self):
        return load_store(self.root / "test")

    def pretrain(self):
        return load_store(self.root / "pretrain", labeled=False)


def build_benchmark(root, cfg: BenchmarkConfig = BenchmarkConfig()) -> Benchmark:
    """Generate (or reuse, when the stored config matches) the benchmark corpora."""
    root = Path(root)
    stamp = root / "benchmark.json"
    want = asdict(cfg)
    if stamp.exists() and json.loads(stamp.read_text()) == want and all(
        (root / d / MANIFEST_NAME).exists() for d in ("train", "test", "pretrain")
    ):
        return Benchmark(root, cfg)
    root.mkdir(parents=True, exist_ok=True)
    devices = sample_device_profiles(cfg.num_devices, derive_seed(cfg.seed, 10), cfg.spread)
    others = sample_device_profiles(cfg.pretrain_devices, derive_seed(cfg.seed, 11), cfg.spread)
    receivers = sample_receiver_profiles(3, derive_seed(cfg.seed, 12))
    generate_corpus(devices, receivers[:2], cfg.train_per_pair, "clean", root / "train",
                    derive_seed(cfg.seed, 20))
    generate_corpus(devices, receivers[2:], cfg.test_per_device, "dynamic_nlos", root / "test",
                    derive_seed(cfg.seed, 21), ranges=condition_ranges("dynamic_nlos", cfg.test_snr_db))
    generate_corpus(others, receivers[:2], cfg.pretrain_per_pair, "clean", root / "pretrain",
                    derive_seed(cfg.seed, 22), labeled=False)
    stamp.write_text(json.dumps(want, indent=1))
    return Benchmark(root, cfg)
