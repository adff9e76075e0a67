import json
import math

import numpy as np
import pytest

from lora_rffi.datasets import (BLOB_NAME, MANIFEST_NAME, DatasetManifest, PacketRecord, PacketStore,
                                UnlabeledStore, condition_ranges, generate_corpus, ingest_raw_iq,
                                load_store, regenerate_corpus)
from lora_rffi.errors import ConfigurationError, CorruptionError, FormatError, InputError
from lora_rffi.impairments import (DeviceProfile, ReceiverProfile, sample_device_profiles,
                                   sample_receiver_profiles)
from lora_rffi.lora_phy import ChirpParams, synthesize_packet

SHORT = ChirpParams(preamble_count=2)


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    out = tmp_path_factory.mktemp("c") / "corpus"
    devs = sample_device_profiles(3, 1)
    rxs = sample_receiver_profiles(2, 2)
    generate_corpus(devs, rxs, 4, "dynamic_nlos", out, seed=9, chirp=SHORT)
    return out


def test_counts_and_layout(small):
    store = load_store(small)
    assert isinstance(store, PacketStore) and len(store) == 3 * 2 * 4
    m = json.loads((small / MANIFEST_NAME).read_text())
    assert m["record_count"] == 24 and m["K"] == 3 and m["M"] == 4
    assert m["blob_bytes"] == (small / BLOB_NAME).stat().st_size == 24 * SHORT.packet_len * 8
    assert sorted(store.label_set) == [0, 1, 2]
    assert [r.offset for r in store.records] == [i * SHORT.packet_len * 8 for i in range(24)]
    assert len(store.filter(receiver_id=1)) == 12 and len(store.filter(channel_tag="clean")) == 0


def test_full_size_counting(tmp_path):
    devs = sample_device_profiles(10, 0)
    rxs = sample_receiver_profiles(2, 0)
    tiny = ChirpParams(preamble_count=1, sample_rate_hz=250e3)
    generate_corpus(devs, rxs, 200, "clean", tmp_path, seed=0, chirp=tiny)
    m = DatasetManifest.from_json((tmp_path / MANIFEST_NAME).read_text())
    assert len(m.records) == 4000 and m.num_devices * 2 * m.packets_per_pair == 4000


def test_clean_identity_chain(tmp_path):
    generate_corpus([DeviceProfile(0), DeviceProfile(1)], [ReceiverProfile(0)], 2, "clean", tmp_path, 3,
                    chirp=SHORT)
    store = load_store(tmp_path)
    ideal = synthesize_packet(SHORT).samples
    for i in range(len(store)):
        x, _ = store[i]
        err = np.mean(np.abs(x - ideal) ** 2) / np.mean(np.abs(ideal) ** 2)
        assert 10 * np.log10(err) == pytest.approx(-60, abs=0.5)
        assert store.records[i].snr_db_nominal == 60


def test_regeneration_bitwise(small, tmp_path):
    regenerate_corpus(small, tmp_path)
    assert (tmp_path / BLOB_NAME).read_bytes() == (small / BLOB_NAME).read_bytes()
    assert (tmp_path / MANIFEST_NAME).read_text() == (small / MANIFEST_NAME).read_text()


def test_static_channel_shared_per_pair(tmp_path):
    generate_corpus([DeviceProfile(0)], [ReceiverProfile(0)], 2, "static_nlos", tmp_path, 4,
                    ranges=condition_ranges("static_nlos", 60), chirp=SHORT)
    store = load_store(tmp_path)
    a, b = store.samples(0), store.samples(1)
    # same channel, independent 60 dB noise
    assert np.mean(np.abs(a - b) ** 2) / np.mean(np.abs(a) ** 2) < 1e-5


def test_round_trip_matches_memory(tmp_path):
    devs, rxs = sample_device_profiles(2, 5), sample_receiver_profiles(1, 5)
    generate_corpus(devs, rxs, 2, "clean", tmp_path, 1, chirp=SHORT)
    store = load_store(tmp_path)
    from lora_rffi.datasets import _synthesize_record
    base = synthesize_packet(SHORT).samples
    for i, r in enumerate(store.records):
        x, _ = _synthesize_record(base, SHORT.sample_rate_hz, devs[r.device_label], rxs[0], "clean",
                                  condition_ranges("clean"), 1, r.device_label, 0, i % 2)
        np.testing.assert_array_equal(store.samples(i), x.astype(np.complex64))


def test_truncated_blob_names_first_bad_record(small, tmp_path):
    import shutil
    shutil.copytree(small, tmp_path / "c")
    blob = tmp_path / "c" / BLOB_NAME
    data = blob.read_bytes()
    rec = SHORT.packet_len * 8
    blob.write_bytes(data[: 20 * rec + 100])
    with pytest.raises(FormatError, match="record 20 "):
        load_store(tmp_path / "c")


def test_single_bit_corruption_detected(small, tmp_path):
    import shutil
    shutil.copytree(small, tmp_path / "c")
    blob = tmp_path / "c" / BLOB_NAME
    data = bytearray(blob.read_bytes())
    rec = SHORT.packet_len * 8
    data[7 * rec + 123] ^= 0x04
    blob.write_bytes(bytes(data))
    store = load_store(tmp_path / "c")
    store.samples(6)
    with pytest.raises(CorruptionError, match="record 7"):
        store.samples(7)


def test_unlabeled_view_hides_labels(small):
    store = load_store(small, labeled=False)
    assert isinstance(store, UnlabeledStore)
    assert not hasattr(store, "labels") and not hasattr(store, "__getitem__")
    assert all(r.device_label is None for r in store._records)
    assert store.samples(0).shape == (SHORT.packet_len,)
    assert isinstance(load_store(small).unlabeled(), UnlabeledStore)


def test_unlabeled_corpus(tmp_path):
    generate_corpus(sample_device_profiles(2, 0), sample_receiver_profiles(1, 0), 1, "clean", tmp_path, 0,
                    chirp=SHORT, labeled=False)
    assert isinstance(load_store(tmp_path), UnlabeledStore)
    with pytest.raises(ConfigurationError):
        load_store(tmp_path, labeled=True)


def test_take_per_label(small):
    store = load_store(small)
    sub = store.take_per_label(3)
    assert len(sub) == 9 and np.bincount(sub.labels).tolist() == [3, 3, 3]
    a, b = store.take_per_label(2, seed=1), store.take_per_label(2, seed=1)
    assert [r.index for r in a.records] == [r.index for r in b.records]
    with pytest.raises(ConfigurationError):
        store.take_per_label(9)


def test_ingest_round_trip(small, tmp_path):
    store = load_store(small)
    out = ingest_raw_iq(small / BLOB_NAME, SHORT.sample_rate_hz, SHORT.packet_len, tmp_path,
                        labels=store.labels)
    ing = load_store(out)
    assert len(ing) == len(store)
    for i in range(len(store)):
        np.testing.assert_array_equal(ing.samples(i), store.samples(i))
        assert ing.records[i].channel_tag == "unknown" and ing[i][1] == store[i][1]


def test_ingest_packet_sizes(tmp_path):
    raw = tmp_path / "cap.iq"
    raw.write_bytes(np.zeros(8192 * 10, "<c8").tobytes())
    store = load_store(ingest_raw_iq(raw, 1e6, 8192, tmp_path / "c"), labeled=False)
    assert len(store) == 10
    assert all(r.length == 65_536 for r in store._records)
    assert math.isinf(store._records[0].snr_db_nominal)


def test_ingest_errors(tmp_path):
    odd = tmp_path / "odd.iq"
    odd.write_bytes(np.zeros(3, "<f4").tobytes())
    with pytest.raises(FormatError, match="odd float count"):
        ingest_raw_iq(odd, 1e6, 1, tmp_path / "a")
    short = tmp_path / "short.iq"
    short.write_bytes(np.zeros(100, "<c8").tobytes())
    with pytest.raises(FormatError, match="800 bytes.*1024"):
        ingest_raw_iq(short, 1e6, 128, tmp_path / "b")
    with pytest.raises(InputError):
        ingest_raw_iq(short, 1e6, 50, tmp_path / "c", labels=[0])


def test_manifest_validation(small, tmp_path):
    text = (small / MANIFEST_NAME).read_text()
    m = DatasetManifest.from_json(text)
    assert DatasetManifest.from_json(m.to_json()).to_json() == text
    d = json.loads(text)
    for bad in ({**d, "version": 99}, {**d, "format": "x"}, {**d, "record_count": 3}):
        with pytest.raises(FormatError):
            DatasetManifest.from_json(json.dumps(bad))
    with pytest.raises(FormatError):
        DatasetManifest.from_json("{not json")
    with pytest.raises(FormatError):
        load_store(tmp_path / "missing")
    with pytest.raises(FormatError):
        PacketRecord(0, 0, 0, "clean", 60.0, 0, 12, 0)
    with pytest.raises(FormatError):
        PacketRecord(0, 0, 0, "rainy", 60.0, 0, 8, 0)


def test_generation_errors(tmp_path):
    devs, rxs = sample_device_profiles(2, 0), sample_receiver_profiles(1, 0)
    with pytest.raises(ConfigurationError):
        generate_corpus(devs, rxs, 0, "clean", tmp_path, 0)
    with pytest.raises(ConfigurationError):
        generate_corpus(devs, rxs, 1, "unknown", tmp_path, 0)
    with pytest.raises(ConfigurationError):
        generate_corpus(devs, rxs + rxs, 1, "clean", tmp_path, 0)
    with pytest.raises(ConfigurationError):
        generate_corpus(devs, rxs, 1, "dynamic_los", tmp_path, 0, ranges=condition_ranges("static_los"))


def test_condition_ranges():
    assert condition_ranges("static_los").doppler_hz == (0.0, 0.0)
    assert condition_ranges("dynamic_nlos", 20).rms_delay_spread_ns == (100.0, 300.0)
    assert condition_ranges("dynamic_nlos", 20).snr_db == (20.0, 20.0)
    with pytest.raises(ConfigurationError):
        condition_ranges("foggy")
