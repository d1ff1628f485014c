"""Acceptance criteria, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line; the lines are
repeated in the pytest terminal summary.  Criterion 10 needs external
capture data and is skipped unless ``PKTIDS_BOTIOT_LABELED`` points at a
labelled CSV of the published extraction.
"""

import os
import time
from fractions import Fraction

import numpy as np
import pytest

from pktids import capture, labeling, metrics, neuralnet as nn, pipeline, svm, trafficgen
from pktids.pipeline import CLASS_NAMES, SUBCATEGORY_CODE

from conftest import SMALL_BUDGETS
from test_neuralnet import batch, compare, jitter_biases, naive_forward, small_net

ATTACK_SUBCATEGORIES = tuple(s for s in labeling.SUBCATEGORIES if s != "normal")


# ------------------------------------------------------------ shared end-to-end run

@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    """Default scenario -> capture -> labels -> prepared dataset -> trained mFNN."""
    t0 = time.perf_counter()
    scen = trafficgen.generate(trafficgen.ScenarioSpec(seed=7), tmp_path_factory.mktemp("e2e"))
    records, stats = capture.read_capture(scen.capture)
    table = labeling.label_records(records, labeling.read_rules(scen.rules))
    prep = pipeline.prepare(table, seed=7)
    w = nn.init_weights(prep.dataset.dense.shape[1], len(CLASS_NAMES), seed=7)
    model, report = nn.fit(w, prep.dataset, prep.splits, prep.weights, nn.TrainConfig(seed=7))
    test = prep.splits.test
    pred = nn.predict(model, *prep.dataset.inputs(test))
    rep = metrics.evaluate(prep.dataset.labels_multiclass[test], pred, CLASS_NAMES)
    return dict(scenario=scen, records=records, stats=stats, table=table, prep=prep,
                model=model, train_report=report, eval=rep, seconds=time.perf_counter() - t0)


# ------------------------------------------------------------ 1. gradient oracle

def test_criterion_01_gradient_oracle(criterion):
    t0 = time.perf_counter()
    worst = 0.0
    for arch in ("mfnn", "bfnn"):
        for seed in (0, 1, 2):
            rng = np.random.default_rng(100 + seed)
            w = small_net(seed)
            if arch == "bfnn":
                w = nn.build_bfnn(w, seed=seed + 10, freeze=False)
            jitter_biases(w, rng)
            dense, ports, methods, labels = batch(rng, w)
            cw = rng.uniform(0.5, 3.0, size=w.n_classes)
            _, grads = nn.backward(w, dense, ports, methods, labels, cw)
            for name in nn.PARAM_NAMES:
                p = getattr(w, name)
                if name in nn.EMBEDDINGS:
                    rows = np.unique(ports.ravel() if name == "port_embedding" else methods.ravel())
                    positions = [(r, c) for r in rows for c in range(p.shape[1])]
                else:
                    positions = list(np.ndindex(p.shape))
                worst = max(worst, compare(w, name, positions, grads, dense, ports, methods, labels, cw))
    secs = time.perf_counter() - t0
    criterion(1, worst <= 1e-3 and secs < 60,
              f"max relative error {worst:.2e} over 8 groups x 3 seeds x 2 models in {secs:.1f}s")


# ------------------------------------------------------------ 2. forward oracle

def test_criterion_02_forward_oracle(criterion):
    worst = 0.0
    for seed in range(3):
        rng = np.random.default_rng(seed)
        w = small_net(seed, hidden=(24, 16))
        jitter_biases(w, rng)
        dense, ports, methods, _ = batch(rng, w, n=16)
        got = nn.forward(w, dense, ports, methods)
        worst = max(worst, float(np.abs(got - naive_forward(w, dense, ports, methods)).max()))
    criterion(2, worst <= 1e-6, f"max abs difference {worst:.2e}")


# ------------------------------------------------------------ 3. synthetic multi-class

def test_criterion_03_multiclass(e2e, criterion):
    rep = e2e["eval"]
    cm = rep.confusion
    n, th = CLASS_NAMES.index("normal"), CLASS_NAMES.index("theft")
    cross = int(cm[n, th] + cm[th, n])
    acc = float(rep.accuracy)
    print(rep.render())
    criterion(3, acc >= 0.98 and cross == 0 and e2e["seconds"] < 600,
              f"test accuracy {100 * acc:.3f}% on {int(cm.sum())} rows, normal<->theft errors {cross}, "
              f"{e2e['seconds']:.0f}s end to end ({e2e['train_report'].stopped_epoch} epochs)")


# ------------------------------------------------------------ 4. synthetic binary

def test_criterion_04_binary(e2e, criterion):
    prep, mfnn = e2e["prep"], e2e["model"]
    ds = prep.dataset
    lines, ok = [], True
    for sub in ATTACK_SUBCATEGORIES:
        code = SUBCATEGORY_CODE[sub]
        view = prep.splits.restrict((ds.labels_subcategory == 0) | (ds.labels_subcategory == code))
        w = nn.build_bfnn(mfnn, seed=7)
        same_before = (np.array_equal(w.port_embedding, mfnn.port_embedding)
                       and np.array_equal(w.method_embedding, mfnn.method_embedding))
        cw = pipeline.class_weights(ds.labels_binary[view.train], n_classes=2)
        model, _ = nn.fit(w, ds, view, cw, nn.TrainConfig(seed=7), labels=ds.labels_binary)
        same_after = (np.array_equal(model.port_embedding, mfnn.port_embedding)
                      and np.array_equal(model.method_embedding, mfnn.method_embedding))
        pred = nn.predict(model, *ds.inputs(view.test))
        m = metrics.evaluate(ds.labels_binary[view.test], pred, ("normal", sub)).binary
        worst = min(m.as_floats().values())
        good = worst >= 0.99 and same_before and same_after and not m.undefined
        ok &= good
        lines.append(f"{sub}:{100 * worst:.2f}%" + ("" if same_before and same_after else "(embeddings changed)"))
    criterion(4, ok, "lowest of acc/prec/rec/F1 per subcategory, embeddings unchanged: " + " ".join(lines))


# ------------------------------------------------------------ 5. metrics

def test_criterion_05_metrics(criterion):
    m = metrics.metrics_from_counts(tp=38883, tn=508725, fp=1, fn=0)
    ok = m.accuracy == Fraction(547608, 547609) and m.precision == Fraction(38883, 38884)
    criterion(5, ok, f"accuracy {m.accuracy}, precision {m.precision}")


# ------------------------------------------------------------ 6. preprocessing properties

def _weights_by_hand(counts):
    top = max(counts)
    return [Fraction(top, c) for c in counts]


def test_criterion_06_preprocessing(e2e, criterion):
    table, prep = e2e["table"], e2e["prep"]
    once = prep.table
    twice = pipeline.preprocess(once)
    idempotent = once.equals(twice)
    total = not once[list(pipeline.INTERMEDIATE_COLUMNS)].isna().any().any()
    ports = prep.dataset.ports
    has_missing = (once["src.port"] == 65536).any() and (ports == 65536).any()
    port_ok = bool(has_missing) and ports.max() <= 65536
    y = prep.dataset.labels_multiclass
    whole = np.bincount(y, minlength=4) / len(y)
    worst_pp = 0.0
    for part in (prep.splits.train, prep.splits.validation, prep.splits.test):
        share = np.bincount(y[part], minlength=4) / len(part)
        worst_pp = max(worst_pp, 100 * float(np.abs(share - whole).max()))
    rng = np.random.default_rng(6)
    weights_ok = True
    for _ in range(5):
        counts = rng.integers(1, 10_000, size=int(rng.integers(2, 6))).tolist()
        labels = np.repeat(np.arange(len(counts)), counts)
        got = pipeline.class_weights(labels, n_classes=len(counts))
        weights_ok &= [got.ratios[c] for c in range(len(counts))] == _weights_by_hand(counts)
    ok = idempotent and total and port_ok and worst_pp <= 0.5 and weights_ok
    criterion(6, ok, f"dedup idempotent={idempotent}, fill total={total}, port code 65536 ok={port_ok}, "
                     f"split drift {worst_pp:.3f}pp, class weights exact={weights_ok} "
                     f"({len(table)} -> {len(once)} rows)")


# ------------------------------------------------------------ 7. capture properties

def test_criterion_07_capture(e2e, criterion):
    records, stats = e2e["records"], e2e["stats"]
    packets, labels, _ = trafficgen.generate_packets(trafficgen.ScenarioSpec(seed=7))
    ip_times = [t for (t, _), lab in zip(packets, labels) if lab is not None]
    round_trip = stats.skipped_ip == 0 and len(records) == len(ip_times)

    by_stream: dict[tuple, list] = {}
    for i, r in enumerate(records):
        if r.tcp_stream is not None:
            by_stream.setdefault(("tcp", r.tcp_stream), []).append(i)
        elif r.udp_stream is not None:
            by_stream.setdefault(("udp", r.udp_stream), []).append(i)
    monotone = all(np.all(np.diff([records[i].frame_time_epoch for i in idx]) >= 0)
                   for idx in by_stream.values())
    monotone &= all(records[i].tcp_time_delta >= 0 for k, idx in by_stream.items() if k[0] == "tcp"
                    for i in idx)

    # ground truth from the generator's own timestamps: SYN -> first client ACK
    worst, checked = 0.0, 0
    for key, idx in by_stream.items():
        if key[0] != "tcp":
            continue
        syn = next((i for i in idx if records[i].tcp_flags & 0x12 == 0x02), None)
        rtt_rows = [i for i in idx if records[i].tcp_analysis_initial_rtt is not None]
        if syn is None or not rtt_rows:
            continue
        ack = next(i for i in idx if records[i].tcp_flags & 0x12 == 0x10 and i > syn)
        truth = (ip_times[ack] - ip_times[syn]) / 1e9
        worst = max(worst, max(abs(records[i].tcp_analysis_initial_rtt - truth) for i in rtt_rows))
        checked += 1
    rtt_ok = checked > 0 and worst <= 1e-6

    icmp = [r for r in records if r.ip_proto and "," in r.ip_proto]
    icmp_ok = bool(icmp) and all(r.ip_proto.startswith("1,") and len(r.ip_ttl.split(",")) == 2
                                 for r in icmp)
    ok = round_trip and monotone and rtt_ok and icmp_ok
    criterion(7, ok, f"{len(records)} IP packets, skipped {stats.skipped_ip}, per-stream monotone={monotone}, "
                     f"RTT max error {worst * 1e6:.3f}us over {checked} handshakes, "
                     f"{len(icmp)} ICMP-embedded rows with outer,inner fields")


# ------------------------------------------------------------ 8. labeling oracle

def test_criterion_08_labeling(tmp_path, criterion):
    mismatches, rows = 0, 0
    for seed in (11, 12, 13):
        scen = trafficgen.generate(trafficgen.ScenarioSpec.only(seed=seed, **SMALL_BUDGETS),
                                   tmp_path / str(seed))
        records, _ = capture.read_capture(scen.capture)
        got = labeling.label_records(records, labeling.read_rules(scen.rules))["label_subcategory"]
        _, expected = trafficgen.read_manifest(scen.manifest)
        mismatches += sum(a != b for a, b in zip(got, expected)) + abs(len(got) - len(expected))
        rows += len(expected)
    criterion(8, mismatches == 0, f"{mismatches} discrepancies over {rows} rows and 3 seeds")


# ------------------------------------------------------------ 9. baseline comparability

def _fnn_on_same_sample(table, result, seed):
    y, _, _ = pipeline.encode_labels(table)
    tr, te = result.train_index, result.test_index
    fold = svm.stratified_folds(y[tr], 5, seed)
    fit_idx, val_idx = tr[fold != 0], tr[fold == 0]
    ds = pipeline.encode(table, pipeline.fit_encoders(table.iloc[fit_idx]))
    cw = pipeline.class_weights(y[fit_idx], n_classes=len(CLASS_NAMES))
    w = nn.init_weights(ds.dense.shape[1], len(CLASS_NAMES), seed=seed)
    model, _ = nn.fit(w, ds, pipeline.SplitIndices(fit_idx, val_idx, te), cw, nn.TrainConfig(seed=seed))
    return float(np.mean(nn.predict(model, *ds.inputs(te)) == y[te]))


def test_criterion_09_baseline(e2e, criterion):
    table = e2e["prep"].table
    small = svm.run_baseline(table, 10_000, seed=7)
    fnn_acc = _fnn_on_same_sample(table, small, seed=7)
    large = svm.run_baseline(table, 50_000, seed=7)
    gap = 100 * (fnn_acc - small.accuracy)
    trend = large.runtime_seconds > small.runtime_seconds and large.accuracy >= small.accuracy - 0.005
    ok = abs(gap) <= 5 and trend
    criterion(9, ok, f"10k: SVC {100 * small.accuracy:.2f}% (C={small.grid.best_C:g}, "
                     f"fit {small.runtime_seconds:.2f}s) vs mFNN {100 * fnn_acc:.2f}%; "
                     f"50k: SVC {100 * large.accuracy:.2f}% (fit {large.runtime_seconds:.2f}s)")


# ------------------------------------------------------------ 10. external data (optional)

PUBLISHED_TOTAL = (11_252_406, 9_163_751)
PUBLISHED_NORMAL = (4_631_398, 2_543_626)


@pytest.mark.skipif(not os.environ.get("PKTIDS_BOTIOT_LABELED"),
                    reason="set PKTIDS_BOTIOT_LABELED to a labelled CSV of the external extraction")
def test_criterion_10_external_dataset(criterion):
    table = labeling.read_labeled(os.environ["PKTIDS_BOTIOT_LABELED"])
    out = pipeline.preprocess(table)
    before_n = int((table["label_category"] == "normal").sum())
    after_n = int((out["label_category"] == "normal").sum())
    counts_ok = ((len(table), len(out)) == PUBLISHED_TOTAL and (before_n, after_n) == PUBLISHED_NORMAL)
    detail = f"rows {len(table)} -> {len(out)}, normal {before_n} -> {after_n}"
    ok = counts_ok
    if os.environ.get("PKTIDS_BOTIOT_TRAIN"):
        prep = pipeline.prepare(table, seed=0)
        w = nn.init_weights(prep.dataset.dense.shape[1], len(CLASS_NAMES), seed=0)
        model, _ = nn.fit(w, prep.dataset, prep.splits, prep.weights, nn.TrainConfig())
        test = prep.splits.test
        acc = float(np.mean(nn.predict(model, *prep.dataset.inputs(test))
                            == prep.dataset.labels_multiclass[test]))
        ok &= acc >= 0.995 and abs(acc - 0.9979) <= 0.003
        detail += f", mFNN accuracy {100 * acc:.3f}%"
    criterion(10, ok, detail)
