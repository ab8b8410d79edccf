import json
import math
import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from topoguard.accountant import (GENESIS, PrivacyLedger, SpendRecord, aggregate_budget_report,
                                  compose, identical_spend_epsilon, read_ledger)
from topoguard.errors import PersistenceError


def recs(eps, delta, k):
    return [SpendRecord(float(i), eps, delta) for i in range(k)]


def test_compose_examples():
    e, d = compose(recs(0.03, 1e-6, 100), 1e-6)
    assert e == pytest.approx(4.577, abs=1e-3)
    assert d == pytest.approx(1.01e-4, abs=1e-12)
    assert compose([], 1e-6) == (0.0, 1e-6)
    e, _ = compose([SpendRecord(0, 0.5, 0.0)], 1e-5)
    assert e == pytest.approx(0.5 + 0.5 * math.sqrt(2 * math.log(1e5)), abs=1e-12)
    # 0.5 * sqrt(2 ln 1e5) = 2.39926, so the total is 2.89926
    assert e == pytest.approx(2.89926, abs=1e-5)


@given(st.floats(1e-4, 5), st.integers(1, 300), st.floats(1e-12, 0.5))
def test_closed_form_consistency(eps, k, dp):
    e, _ = compose(recs(eps, 0.0, k), dp)
    assert e == pytest.approx(identical_spend_epsilon(eps, k, dp), rel=1e-12)


def test_monotonicity():
    rng = np.random.default_rng(0)
    r = []
    prev = compose(r)
    for _ in range(50):
        r.append(SpendRecord(0, float(rng.uniform(1e-3, 1)), float(rng.uniform(1e-9, 1e-6))))
        cur = compose(r)
        assert cur[0] > prev[0] and cur[1] > prev[1]
        prev = cur


def test_budget_gate_examples():
    led = PrivacyLedger(budget_epsilon=4.0)
    assert led.try_spend(0.3, 0.0).accepted
    led = PrivacyLedger(budget_epsilon=4.0)
    accepted = sum(led.try_spend(0.03, 1e-6).accepted for _ in range(100))
    assert accepted < 100
    assert led.totals()[0] <= 4.0
    refused = led.try_spend(0.03, 1e-6)
    assert not refused.accepted and refused.reason == "budget exceeded"
    led5 = PrivacyLedger(budget_epsilon=5.0)
    assert all(led5.try_spend(0.03, 1e-6).accepted for _ in range(100))


def test_report_examples():
    led = PrivacyLedger(delta_prime=1e-5)
    for _ in range(100):
        led.try_spend(0.3, 0.0)
    rep = aggregate_budget_report(led)
    assert rep["identical_spend"]["epsilon_aggregate"] == pytest.approx(
        30 + 0.3 * math.sqrt(200 * math.log(1e5)), abs=1e-9)
    assert rep["identical_spend"]["epsilon_aggregate"] > 44
    assert identical_spend_epsilon(0.3, 1, 1e-5) == pytest.approx(
        0.3 + 0.3 * math.sqrt(2 * math.log(1e5)))
    assert identical_spend_epsilon(0.3, 0, 1e-5) == 0.0


def test_persistence_and_hash_chain(tmp_path):
    path = tmp_path / "ledger.jsonl"
    led = PrivacyLedger(path=path)
    for k in range(5):
        assert led.try_spend(0.1, 1e-7, f"t{k}").accepted
    records, last, dropped = read_ledger(path)
    assert len(records) == 5 and dropped == 0 and last != GENESIS
    again = PrivacyLedger(path=path)
    assert again.totals() == led.totals()
    lines = path.read_text().splitlines()
    doc = json.loads(lines[2])
    doc["eps"] = 0.01
    lines[2] = json.dumps(doc, sort_keys=True)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(PersistenceError):
        read_ledger(path)


def test_crash_mid_append_recovers_pre_spend_state(tmp_path):
    path = tmp_path / "ledger.jsonl"
    led = PrivacyLedger(path=path)
    led.try_spend(0.2, 0.0)
    before = led.totals()
    full = path.read_bytes()
    led.try_spend(0.2, 0.0)
    after = led.totals()
    torn = path.read_bytes()
    for cut in range(len(full), len(torn)):
        path.write_bytes(torn[:cut])
        state = PrivacyLedger(path=path).totals()
        assert state in (before, after)
    path.write_bytes(torn[:len(full) + 10])
    led2 = PrivacyLedger(path=path)
    assert led2.totals() == before
    assert led2.try_spend(0.2, 0.0).accepted
    assert len(read_ledger(path)[0]) == 2


def test_concurrent_spenders_respect_budget(tmp_path):
    path = tmp_path / "ledger.jsonl"
    budget = 2.0
    ledgers = [PrivacyLedger(budget_epsilon=budget, path=path) for _ in range(4)]
    results = []

    def worker(led):
        for _ in range(25):
            results.append(led.try_spend(0.05, 0.0).accepted)

    threads = [threading.Thread(target=worker, args=(l,)) for l in ledgers]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    records, _, _ = read_ledger(path)
    assert len(records) == sum(results)
    e, _ = compose(records)
    assert e <= budget
    # exactly the fitting prefix was admitted
    k = len(records)
    assert identical_spend_epsilon(0.05, k + 1, 1e-6) > budget


def test_persistence_failure_refuses(tmp_path):
    led = PrivacyLedger(path=tmp_path / "missing-dir" / "ledger.jsonl")
    dec = led.try_spend(0.1, 0.0)
    assert not dec.accepted and led.records == []
