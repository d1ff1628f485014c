import numpy as np
import pytest

from pktids import capture, labeling, trafficgen as tg


def test_only_normal_ten_packets(tmp_path):
    out = tg.generate(tg.ScenarioSpec.only(seed=3, normal=10), tmp_path)
    recs, stats = capture.read_capture(out.capture)
    assert len(recs) == 10 and stats.skipped_ip == 0
    table = labeling.label_records(recs, labeling.read_rules(out.rules))
    assert (table["label_subcategory"] == "normal").all()
    assert out.counts["normal"] == 10


def test_byte_identical_across_runs(tmp_path):
    spec = tg.ScenarioSpec.only(seed=9, normal=200, dos_udp=100, keylogging=50)
    a = tg.generate(spec, tmp_path / "a")
    b = tg.generate(spec, tmp_path / "b")
    assert a.capture.read_bytes() == b.capture.read_bytes()
    assert a.rules.read_text() == b.rules.read_text()
    assert a.manifest.read_text() == b.manifest.read_text()


def test_different_seed_differs(tmp_path):
    a = tg.generate(tg.ScenarioSpec.only(seed=1, normal=50), tmp_path / "a")
    b = tg.generate(tg.ScenarioSpec.only(seed=2, normal=50), tmp_path / "b")
    assert a.capture.read_bytes() != b.capture.read_bytes()


def test_manifest_round_trip(small_scenario):
    counts, labels = tg.read_manifest(small_scenario.manifest)
    assert labels == small_scenario.labels
    assert counts == small_scenario.counts
    assert sum(counts.values()) == len(labels)


def test_budgets_exact(small_scenario):
    from conftest import SMALL_BUDGETS
    assert small_scenario.counts == SMALL_BUDGETS


def test_timestamps_strictly_increase(small_scenario):
    recs, _ = capture.read_capture(small_scenario.capture)
    t = np.array([r.frame_time_epoch for r in recs])
    assert (np.diff(t) > 0).all()


def test_spec_validation():
    with pytest.raises(ValueError):
        tg.ScenarioSpec(budgets={"normal": -1})
    with pytest.raises(ValueError):
        tg.ScenarioSpec(budgets={"bogus": 1})
    with pytest.raises(ValueError):
        tg.ScenarioSpec(roster=tg.Roster(bots=("192.168.100.10",)))
    with pytest.raises(tg.BudgetOverflow):
        tg.ScenarioSpec(base_epoch=2**32 - 100)


def test_window_too_short_overflows():
    spec = tg.ScenarioSpec.only(seed=1, dos_tcp=5000)
    spec.windows = dict(spec.windows, dos_tcp=(spec.windows["dos_tcp"][0], spec.windows["dos_tcp"][0] + 0.001))
    with pytest.raises(tg.BudgetOverflow):
        tg.generate_packets(spec)


def test_attack_signatures(small_labeled):
    t = small_labeled
    by = t.groupby("label_subcategory")
    syn_only = by["tcp.flags"].apply(lambda s: (s == 0x02).mean())
    assert syn_only["dos_tcp"] > 0.3 and syn_only["service_scan"] > 0.3
    assert syn_only["normal"] < 0.1
    exfil = t[t.label_subcategory == "data_exfiltration"]["tcp.len"].dropna()
    keylog = t[t.label_subcategory == "keylogging"]["tcp.len"].dropna()
    assert exfil.max() == 1448 and keylog.max() < 200
    http = t[t.label_subcategory.isin(["ddos_http", "dos_http"])]
    assert (http["http.request.method"] == "GET").any()
    assert http["http.response.code"].isin([200, 404]).any()
    icmp = t[t["ip.proto"].astype(str).str.contains(",")]
    assert len(icmp) > 0


def test_ddos_uses_several_bots_dos_one(small_labeled):
    t = small_labeled
    bots = set(tg.Roster().bots)

    def attackers(sub):
        rows = t[t.label_subcategory == sub]
        return (set(rows["ip.src"]) | set(rows["ip.dst"])) & bots

    assert len(attackers("ddos_tcp")) >= 2
    assert len(attackers("dos_tcp")) == 1


def test_normal_has_handshakes_to_broker(small_labeled):
    t = small_labeled
    normal = t[t.label_subcategory == "normal"]
    tcp = normal[normal["tcp.dstport"].notna()]
    assert (tcp["tcp.dstport"] == tg.MQTT_PORT).any()
    assert tcp["tcp.analysis.initial_rtt"].notna().any()


def test_pcap_writer_variants_parse_identically(tmp_path):
    packets, _, _ = tg.generate_packets(tg.ScenarioSpec.only(seed=4, normal=40, dos_udp=40))
    tg.write_pcap(tmp_path / "a.pcap", packets)
    tg.write_pcap(tmp_path / "b.pcap", packets, nanosecond=True, big_endian=True)
    a = capture.parse_capture(tmp_path / "a.pcap")
    b = capture.parse_capture(tmp_path / "b.pcap")
    assert a == b


def test_checksums_valid():
    frame = tg.frame_ipv4("10.0.0.1", "10.0.0.2", 17, tg.udp_datagram("10.0.0.1", "10.0.0.2", 1, 2, b"abc"))
    assert tg.inet_checksum(frame[14:34]) == 0
