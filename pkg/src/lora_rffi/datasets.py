"""Packet corpora on disk.

A corpus is a directory holding ``manifest.json`` (versioned, human
readable) and ``packets.iq``, a blob of interleaved little-endian float32
I/Q samples. Every record carries its byte offset/length in the blob and a
CRC-32 of those bytes. Manifests of generated corpora embed every profile
and seed, so the blob can be regenerated bit for bit.
"""

from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .channel import AugmentationRanges, add_awgn, apply_channel, derive_seed, sample_channel
from .errors import ConfigurationError, CorruptionError, FormatError, InputError
from .impairments import (DeviceProfile, ReceiverProfile, apply_rx_impairments,
                          apply_tx_impairments)
from .lora_phy import ChirpParams, ComplexSignal, synthesize_packet

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "packets.iq"
BYTES_PER_SAMPLE = 8  # float32 I + float32 Q
CHANNEL_TAGS = ("clean", "static_los", "static_nlos", "dynamic_los", "dynamic_nlos", "unknown")
CLEAN_SNR_DB = 60.0


@dataclass(frozen=True)
class PacketRecord:
    index: int
    device_label: int | None
    receiver_id: int
    channel_tag: str
    snr_db_nominal: float
    offset: int
    length: int  # bytes
    crc32: int

    def __post_init__(self):
        if self.channel_tag not in CHANNEL_TAGS:
            raise FormatError(f"record {self.index}: unknown channel tag {self.channel_tag!r}")
        if self.length % BYTES_PER_SAMPLE:
            raise FormatError(f"record {self.index}: length {self.length} is not a whole number of samples")

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(self.snr_db_nominal):
            d["snr_db_nominal"] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PacketRecord":
        d = dict(d)
        if d.get("snr_db_nominal") is None:
            d["snr_db_nominal"] = math.inf
        return cls(**d)


@dataclass
class DatasetManifest:
    fs: float
    packet_len: int
    num_devices: int
    packets_per_pair: int
    labeled: bool
    records: list = field(default_factory=list)
    chirp: dict | None = None
    devices: list = field(default_factory=list)
    receivers: list = field(default_factory=list)
    generation: dict | None = None
    blob: str = BLOB_NAME
    blob_bytes: int = 0
    version: int = MANIFEST_VERSION

    def to_json(self) -> str:
        d = {
            "format": "lora-rffi-corpus",
            "version": self.version,
            "fs": self.fs,
            "packet_len": self.packet_len,
            "K": self.num_devices,
            "M": self.packets_per_pair,
            "labeled": self.labeled,
            "chirp": self.chirp,
            "devices": self.devices,
            "receivers": self.receivers,
            "generation": self.generation,
            "blob": self.blob,
            "blob_bytes": self.blob_bytes,
            "record_count": len(self.records),
            "records": [r.to_dict() for r in self.records],
        }
        return json.dumps(d, indent=1)

    @classmethod
    def from_json(cls, text: str, source="manifest") -> "DatasetManifest":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{source}: invalid JSON ({exc})") from None
        if d.get("format") != "lora-rffi-corpus":
            raise FormatError(f"{source}: not a corpus manifest")
        if d.get("version") != MANIFEST_VERSION:
            raise FormatError(f"{source}: unsupported manifest version {d.get('version')}")
        records = [PacketRecord.from_dict(r) for r in d["records"]]
        if len(records) != d["record_count"]:
            raise FormatError(f"{source}: record_count {d['record_count']} != {len(records)} records")
        m = cls(
            fs=d["fs"], packet_len=d["packet_len"], num_devices=d["K"], packets_per_pair=d["M"],
            labeled=d["labeled"], records=records, chirp=d["chirp"], devices=d["devices"],
            receivers=d["receivers"], generation=d["generation"], blob=d["blob"],
            blob_bytes=d["blob_bytes"], version=d["version"],
        )
        for r in records:
            if (r.device_label is None) == m.labeled:
                raise FormatError(f"{source}: record {r.index} label presence disagrees with 'labeled'")
        return m


# ---------------------------------------------------------------- stores


class _BlobReader:
    def __init__(self, path: Path, records, fs: float):
        self.path = path
        self.fs = fs
        size = path.stat().st_size if path.exists() else -1
        if size < 0:
            raise FormatError(f"blob {path} does not exist")
        for r in records:
            if r.offset < 0 or r.offset + r.length > size:
                raise FormatError(
                    f"{path}: record {r.index} spans bytes [{r.offset}, {r.offset + r.length}) "
                    f"beyond blob size {size}"
                )
        self._mm = np.memmap(path, dtype=np.uint8, mode="r") if size > 0 else np.zeros(0, np.uint8)

    def read(self, r: PacketRecord) -> np.ndarray:
        raw = self._mm[r.offset:r.offset + r.length]
        if zlib.crc32(raw) != r.crc32:
            raise CorruptionError(f"{self.path}: checksum mismatch in record {r.index} (offset {r.offset})")
        return np.frombuffer(raw.tobytes(), dtype="<c8").astype(np.complex128)


class UnlabeledStore:
    """Random access to packets only; no label is reachable through it."""

    def __init__(self, reader: _BlobReader, records, packet_len: int):
        self._reader = reader
        self._records = [replace(r, device_label=None) for r in records]
        self.packet_len = packet_len
        self.fs = reader.fs

    def __len__(self) -> int:
        return len(self._records)

    def samples(self, i: int) -> np.ndarray:
        return self._reader.read(self._records[i])

    def signal(self, i: int) -> ComplexSignal:
        return ComplexSignal(self.samples(i), self.fs)

    def subset(self, indices) -> "UnlabeledStore":
        return UnlabeledStore(self._reader, [self._records[i] for i in indices], self.packet_len)


class PacketStore:
    """Labeled packet store: ``store[i] -> (samples, label)``."""

    def __init__(self, reader: _BlobReader, records, packet_len: int, num_classes: int,
                 manifest: DatasetManifest | None = None):
        self._reader = reader
        self.records = list(records)
        self.packet_len = packet_len
        self.num_classes = num_classes
        self.fs = reader.fs
        self.manifest = manifest

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int):
        return self.samples(i), self.records[i].device_label

    def samples(self, i: int) -> np.ndarray:
        return self._reader.read(self.records[i])

    def signal(self, i: int) -> ComplexSignal:
        return ComplexSignal(self.samples(i), self.fs)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.device_label for r in self.records], dtype=np.int64)

    @property
    def label_set(self) -> set:
        return {r.device_label for r in self.records}

    def subset(self, indices) -> "PacketStore":
        return PacketStore(self._reader, [self.records[i] for i in indices], self.packet_len,
                           self.num_classes, self.manifest)

    def filter(self, receiver_id: int | None = None, channel_tag: str | None = None) -> "PacketStore":
        keep = [i for i, r in enumerate(self.records)
                if (receiver_id is None or r.receiver_id == receiver_id)
                and (channel_tag is None or r.channel_tag == channel_tag)]
        return self.subset(keep)

    def take_per_label(self, count: int, seed: int | None = None) -> "PacketStore":
        """First ``count`` packets of every label (or a seeded random choice)."""
        by_label: dict[int, list[int]] = {}
        for i, r in enumerate(self.records):
            by_label.setdefault(r.device_label, []).append(i)
        keep = []
        rng = None if seed is None else np.random.default_rng(seed)
        for label in sorted(by_label):
            idx = by_label[label]
            if count > len(idx):
                raise ConfigurationError(f"label {label} has {len(idx)} packets, {count} requested")
            keep.extend(idx[:count] if rng is None else sorted(rng.choice(idx, count, replace=False)))
        return self.subset(sorted(keep))

    def unlabeled(self) -> UnlabeledStore:
        return UnlabeledStore(self._reader, self.records, self.packet_len)


def load_store(manifest_path, labeled: bool | None = None):
    """Open a corpus. ``labeled=False`` yields an :class:`UnlabeledStore`
    even over a labeled manifest; ``None`` follows the manifest."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.exists():
        raise FormatError(f"manifest {manifest_path} does not exist")
    m = DatasetManifest.from_json(manifest_path.read_text(), source=str(manifest_path))
    reader = _BlobReader(manifest_path.parent / m.blob, m.records, m.fs)
    if labeled is None:
        labeled = m.labeled
    if not labeled:
        return UnlabeledStore(reader, m.records, m.packet_len)
    if not m.labeled:
        raise ConfigurationError(f"{manifest_path}: corpus has no labels")
    return PacketStore(reader, m.records, m.packet_len, m.num_devices, m)


# ---------------------------------------------------------------- generation


def condition_ranges(channel_tag: str, snr_db: float = 20.0) -> AugmentationRanges:
    """Channel ranges for a named test condition.

    LOS draws short RMS delay spreads (5-50 ns), NLOS long ones (100-300 ns);
    static conditions have no Doppler, dynamic ones 1-5 Hz.
    """
    if channel_tag == "clean":
        return AugmentationRanges((0, 0), (0, 0), (CLEAN_SNR_DB, CLEAN_SNR_DB))
    if channel_tag not in CHANNEL_TAGS[1:5]:
        raise ConfigurationError(f"unknown channel tag {channel_tag!r}")
    delay = (5.0, 50.0) if channel_tag.endswith("_los") else (100.0, 300.0)
    doppler = (0.0, 0.0) if channel_tag.startswith("static") else (1.0, 5.0)
    return AugmentationRanges(delay, doppler, (snr_db, snr_db))


def _synthesize_record(base: np.ndarray, fs: float, dev: DeviceProfile, rx: ReceiverProfile,
                       tag: str, ranges: AugmentationRanges, seed: int, di: int, ri: int, i: int):
    sig = apply_tx_impairments(ComplexSignal(base, fs), dev)
    pkt_seed = derive_seed(seed, 0, di, ri, i)
    if tag.startswith("static"):
        static = replace(ranges, doppler_hz=(0.0, 0.0))
        sig = apply_channel(sig, sample_channel(static, derive_seed(seed, 1, di, ri), len(sig), fs))
    elif tag.startswith("dynamic"):
        sig = apply_channel(sig, sample_channel(ranges, derive_seed(pkt_seed, 0), len(sig), fs))
    sig = apply_rx_impairments(sig, rx)
    snr = float(np.random.default_rng(derive_seed(pkt_seed, 1)).uniform(*ranges.snr_db))
    sig = add_awgn(sig, snr, derive_seed(pkt_seed, 2))
    return sig.samples, snr


def generate_corpus(devices, receivers, per_pair: int, channel_tag: str, out_dir, seed: int,
                    ranges: AugmentationRanges | None = None, chirp: ChirpParams | None = None,
                    labeled: bool = True) -> Path:
    """Write ``per_pair`` packets for every (device, receiver) pair.

    Chain: preamble -> TX impairments -> channel -> RX impairments -> AWGN.
    ``clean`` uses no channel and 60 dB SNR; ``static_*`` reuses one
    zero-Doppler channel per (device, receiver); ``dynamic_*`` draws a fresh
    fading channel per packet. Returns the manifest path.
    """
    if per_pair < 1:
        raise ConfigurationError(f"per_pair must be >= 1, got {per_pair}")
    if channel_tag not in CHANNEL_TAGS[:5]:
        raise ConfigurationError(f"channel_tag must be one of {CHANNEL_TAGS[:5]}, got {channel_tag!r}")
    chirp = chirp or ChirpParams()
    if ranges is None:
        ranges = condition_ranges(channel_tag)
    if channel_tag == "clean":
        ranges = condition_ranges("clean")
    if channel_tag.startswith("dynamic") and ranges.doppler_hz[1] <= 0:
        raise ConfigurationError("dynamic conditions need a Doppler range above 0 Hz")
    labels = sorted(d.device_id for d in devices)
    if labeled and labels != list(range(len(devices))):
        raise ConfigurationError(f"device ids must be 0..K-1, got {labels}")
    if len({r.receiver_id for r in receivers}) != len(receivers):
        raise ConfigurationError("receiver ids must be unique")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fs = chirp.sample_rate_hz
    base = synthesize_packet(chirp).samples
    records = []
    offset = 0
    blob_path = out_dir / BLOB_NAME
    try:
        with open(blob_path, "wb") as fh:
            for di, dev in enumerate(devices):
                for ri, rx in enumerate(receivers):
                    for i in range(per_pair):
                        samples, snr = _synthesize_record(base, fs, dev, rx, channel_tag, ranges, seed, di, ri, i)
                        raw = samples.astype("<c8").tobytes()
                        fh.write(raw)
                        records.append(PacketRecord(
                            index=len(records),
                            device_label=dev.device_id if labeled else None,
                            receiver_id=rx.receiver_id, channel_tag=channel_tag,
                            snr_db_nominal=snr, offset=offset, length=len(raw),
                            crc32=zlib.crc32(raw),
                        ))
                        offset += len(raw)
    except OSError as exc:
        raise FormatError(f"{blob_path}: write failed at offset {offset}: {exc}") from exc

    manifest = DatasetManifest(
        fs=fs, packet_len=chirp.packet_len, num_devices=len(devices), packets_per_pair=per_pair,
        labeled=labeled, records=records, chirp=chirp.to_dict(),
        devices=[d.to_dict() for d in devices], receivers=[r.to_dict() for r in receivers],
        generation={"seed": int(seed), "channel_tag": channel_tag, "ranges": ranges.to_dict()},
        blob_bytes=offset,
    )
    path = out_dir / MANIFEST_NAME
    path.write_text(manifest.to_json())
    return path


def regenerate_corpus(manifest_path, out_dir) -> Path:
    """Rebuild a generated corpus from the profiles and seeds in its manifest."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    m = DatasetManifest.from_json(manifest_path.read_text(), source=str(manifest_path))
    if m.generation is None:
        raise ConfigurationError(f"{manifest_path}: corpus was ingested, not generated")
    g = m.generation
    return generate_corpus(
        [DeviceProfile.from_dict(d) for d in m.devices],
        [ReceiverProfile.from_dict(r) for r in m.receivers],
        m.packets_per_pair, g["channel_tag"], out_dir, g["seed"],
        ranges=AugmentationRanges.from_dict(g["ranges"]),
        chirp=ChirpParams.from_dict(m.chirp), labeled=m.labeled,
    )


def ingest_raw_iq(path, fs: float, packet_len: int, out_dir, labels=None,
                  receiver_id: int = 0) -> Path:
    """Wrap a raw file of interleaved little-endian float32 I/Q as a corpus.

    The file must hold a whole number of ``packet_len``-sample packets.
    ``labels`` (one per packet) makes the corpus labeled.
    """
    path = Path(path)
    size = os.path.getsize(path)
    pkt_bytes = packet_len * BYTES_PER_SAMPLE
    if size % 4:
        raise FormatError(f"{path}: {size} bytes is not a whole number of float32 values")
    if (size // 4) % 2:
        raise FormatError(f"{path}: odd float count {size // 4} cannot form I/Q pairs")
    if packet_len < 1 or size % pkt_bytes:
        raise FormatError(
            f"{path}: size {size} bytes is not a multiple of the packet size "
            f"{pkt_bytes} bytes (expected {(size // max(pkt_bytes, 1) + 1) * pkt_bytes} or "
            f"{(size // max(pkt_bytes, 1)) * pkt_bytes})"
        )
    count = size // pkt_bytes
    if labels is not None:
        labels = [int(v) for v in labels]
        if len(labels) != count:
            raise InputError(f"{len(labels)} labels for {count} packets")
        if min(labels) < 0:
            raise InputError("labels must be non-negative")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = path.read_bytes()
    (out_dir / BLOB_NAME).write_bytes(data)
    records = []
    for i in range(count):
        raw = data[i * pkt_bytes:(i + 1) * pkt_bytes]
        records.append(PacketRecord(
            index=i, device_label=None if labels is None else labels[i], receiver_id=receiver_id,
            channel_tag="unknown", snr_db_nominal=math.inf, offset=i * pkt_bytes,
            length=pkt_bytes, crc32=zlib.crc32(raw),
        ))
    manifest = DatasetManifest(
        fs=fs, packet_len=packet_len,
        num_devices=0 if labels is None else max(labels) + 1,
        packets_per_pair=0, labeled=labels is not None, records=records, blob_bytes=size,
    )
    out = out_dir / MANIFEST_NAME
    out.write_text(manifest.to_json())
    return out
