import random
from dataclasses import replace
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from mamo_billing.assurance import (
    AssuranceFile,
    CountMark,
    assure,
    contrast_parameters,
    merge_archives,
    read_assurance_files,
    revenue_report,
    sort_archive,
    write_assurance_files,
    write_report,
)
from mamo_billing.errors import InsufficientBalance, ScheduleMismatch, UnknownField
from mamo_billing.netsim import CallRecord, ScheduleBatch
from mamo_billing.rating import Account, Rounding, Tariff, adjust_balance, rate_call, recharge
from mamo_billing.reconciler import BillingBatch, InFields, Provenance, ReconciledRecord

from oracles import merge_by_cross_join

PER_SECOND = Tariff(0, Fraction(1))


def call(cid, duration=60, caller="9800", account=10_000, tariff=PER_SECOND):
    charge = rate_call(duration, tariff)
    return CallRecord(cid, 1000 + cid, duration, charge, account, account - charge, caller, "900", 10 * cid)


def reconciled(rec: CallRecord, **changes) -> ReconciledRecord:
    fields = InFields(
        rec.call_id,
        rec.charged_duration,
        rec.caller,
        rec.callee,
        rec.start_time,
        rec.account_before,
        rec.final_charge,
        rec.account_after,
    )
    return ReconciledRecord(
        rec.correlation_id, rec.call_id, replace(fields, **changes), None, {}, Provenance.BILLED_WITHOUT_HANDSET, "T"
    )


def batches(switch_ids, billing_ids, start=0, end=10_000):
    sw = ScheduleBatch("T", start, end, tuple(call(i) for i in sorted(switch_ids)))
    bb = BillingBatch("T", start, end, tuple(reconciled(call(i)) for i in billing_ids))
    return sw, bb


# -- sorting and merging


def test_sort_archive():
    assert sort_archive([]) == []
    recs = [call(i) for i in range(1, 6)]
    assert sort_archive(recs) == recs
    shuffled = [call(i) for i in range(1000)]
    random.Random(0).shuffle(shuffled)
    assert [r.call_id for r in sort_archive(shuffled)] == list(range(1000))


def test_identical_archives_match():
    f = merge_archives(*batches({1, 2, 3}, [1, 2, 3]))
    assert f.count_mark.match and f.unmatched_marks == ()


def test_missing_billing_record():
    f = merge_archives(*batches({1, 2, 3}, [1, 3]))
    assert f.count_mark == CountMark(3, 2) and not f.count_mark.match
    assert f.unmatched_marks == (2,)
    assert [e.call_id for e in f.switch_only] == [2]


def test_disjoint_archives_match_counts_not_ids():
    f = merge_archives(*batches({1, 2}, [3, 4]))
    assert f.count_mark.match
    assert f.unmatched_marks == (1, 2, 3, 4)


def test_merged_sorted_and_unmatched_one_sided():
    f = merge_archives(*batches({5, 1, 9}, [9, 2, 1]))
    assert [e.call_id for e in f.merged] == [1, 2, 5, 9]
    for cid in f.unmatched_marks:
        (entry,) = [e for e in f.merged if e.call_id == cid]
        assert (entry.switch is None) != (entry.reconciled is None)


def test_window_mismatch():
    sw, _ = batches({1}, [1])
    _, bb = batches({1}, [1], end=20_000)
    with pytest.raises(ScheduleMismatch):
        merge_archives(sw, bb)


# -- parameter contrast


def test_equal_records_have_no_marks():
    assert assure(*batches({1, 2}, [1, 2])).parameter_marks == ()


def test_duration_divergence_marked():
    sw = ScheduleBatch("T", 0, 10_000, (call(7),))
    bb = BillingBatch("T", 0, 10_000, (reconciled(call(7), charged_duration=58),))
    f = contrast_parameters(merge_archives(sw, bb), ["charged_duration"])
    (mark,) = f.parameter_marks
    assert (mark.call_id, mark.field_name, mark.switch_value, mark.reconciled_value) == (7, "charged_duration", 60, 58)


def test_empty_field_list_is_identity():
    f = merge_archives(*batches({1, 2}, [1]))
    assert contrast_parameters(f, []) == f


def test_unknown_field():
    with pytest.raises(UnknownField):
        contrast_parameters(merge_archives(*batches({1}, [1])), ["colour"])


def test_assurance_file_round_trip(tmp_path):
    sw = ScheduleBatch("T", 0, 10_000, (call(1), call(2)))
    bb = BillingBatch("T", 0, 10_000, (reconciled(call(2), final_charge=3),))
    f = assure(sw, bb)
    assert AssuranceFile.from_jsonl(f.to_jsonl()) == f
    (path,) = write_assurance_files([f], tmp_path)
    assert path.name == "assurance_T.jsonl"
    assert path.read_text().splitlines()[-1].startswith('{"marks":')
    assert read_assurance_files(tmp_path) == [f]


@given(
    st.sets(st.integers(1, 60), max_size=25),
    st.sets(st.integers(1, 60), max_size=25),
    st.dictionaries(st.integers(1, 60), st.integers(0, 3)),
)
def test_merge_matches_cross_join(switch_ids, billing_ids, skew):
    sw = ScheduleBatch("T", 0, 10_000, tuple(call(i) for i in sorted(switch_ids)))
    bb = BillingBatch(
        "T", 0, 10_000, tuple(reconciled(call(i), charged_duration=60 + skew.get(i, 0)) for i in billing_ids)
    )
    f = assure(sw, bb)
    fields = ["charged_duration", "final_charge"]
    expected = merge_by_cross_join(
        sorted(switch_ids),
        list(billing_ids),
        {i: {"charged_duration": 60, "final_charge": 60} for i in switch_ids},
        {i: {"charged_duration": 60 + skew.get(i, 0), "final_charge": 60} for i in billing_ids},
        fields,
    )
    got = (
        f.count_mark.match,
        list(f.unmatched_marks),
        sorted((m.call_id, m.field_name, m.switch_value, m.reconciled_value) for m in f.parameter_marks),
    )
    assert got == expected


# -- rating and balances


def test_rate_call_examples():
    assert rate_call(0, Tariff(setup_fee=2)) == 2
    assert rate_call(60, Tariff(0, Fraction(1, 2))) == 30
    assert rate_call(61, Tariff(0, Fraction(1, 2), Rounding.PER_MINUTE_CEIL)) == 60


def test_fractional_charge_rounds_up():
    assert rate_call(3, Tariff(0, Fraction(1, 2))) == 2


def test_adjust_balance():
    acct = Account("9800", 100)
    assert adjust_balance(acct, 0) == acct
    assert adjust_balance(acct, 30).balance == 70
    with pytest.raises(InsufficientBalance):
        adjust_balance(Account("9800", 10), 30)
    assert adjust_balance(Account("9800", 10, floor=-50), 30).balance == -20


def test_recharge_logs():
    acct = recharge(Account("9800", 0), 5, 100)
    assert acct.balance == 100 and acct.recharge_log == ((5, 100),)


def test_invalid_tariff():
    with pytest.raises(ValueError):
        Tariff(setup_fee=-1)


# -- revenue


def _files(switch_ids, billing_ids, tariff=PER_SECOND):
    sw = ScheduleBatch("T", 0, 10_000, tuple(call(i, tariff=tariff) for i in sorted(switch_ids)))
    bb = BillingBatch("T", 0, 10_000, tuple(reconciled(call(i, tariff=tariff)) for i in billing_ids))
    return [assure(sw, bb)]


def test_zero_loss_recovers_nothing():
    report = revenue_report(_files(range(1, 11), range(1, 11)), PER_SECOND)
    assert report.balance_before_extended_mamo == report.balance_after_extended_mamo == 600
    assert report.recovered_amount == 0 and report.recovered_percentage == 0.0


def test_two_dropped_records():
    report = revenue_report(_files(range(1, 11), [1, 2, 3, 5, 6, 7, 9, 10]), PER_SECOND)
    assert report.balance_before_extended_mamo == 480
    assert report.balance_after_extended_mamo == 600
    assert report.recovered_amount == 120
    assert report.recovered_percentage == 25.0
    assert report.total_transaction_amount == 600
    assert report.recharge_count == 1


def test_switch_value_wins_on_disagreement():
    sw = ScheduleBatch("T", 0, 10_000, (call(1),))
    bb = BillingBatch("T", 0, 10_000, (reconciled(call(1), charged_duration=50),))
    report = revenue_report([assure(sw, bb)], PER_SECOND)
    assert (report.balance_before_extended_mamo, report.balance_after_extended_mamo) == (50, 60)


def test_insufficient_balance_reduces_net():
    recs = (call(1, account=100), call(2, account=40), call(3, duration=50, account=40))
    sw = ScheduleBatch("T", 0, 10_000, recs)
    bb = BillingBatch("T", 0, 10_000, tuple(reconciled(r) for r in recs))
    report = revenue_report([assure(sw, bb)], PER_SECOND)
    # one caller: top-up 100, then 60 ok, 60 refused, 50 refused
    assert report.total_transaction_amount == 170
    assert report.net_calculation_amount == 60


def test_recovered_equals_switch_only_charges():
    rng = random.Random(4)
    for _ in range(20):
        ids = range(1, 40)
        kept = [i for i in ids if rng.random() > 0.2]
        files = _files(ids, kept)
        report = revenue_report(files, PER_SECOND)
        switch_only = sum(rate_call(e.switch, PER_SECOND) for f in files for e in f.switch_only)
        assert report.recovered_amount == switch_only


def test_report_independent_of_pair_order(tmp_path):
    a = _files(range(1, 6), [1, 2])[0]
    sw = ScheduleBatch("U", 10_000, 20_000, tuple(call(i) for i in range(10, 15)))
    bb = BillingBatch("U", 10_000, 20_000, tuple(reconciled(call(i)) for i in range(10, 14)))
    b = assure(sw, bb)
    assert revenue_report([a, b], PER_SECOND) == revenue_report([b, a], PER_SECOND)
    js, cs = write_report(revenue_report([a, b], PER_SECOND), tmp_path)
    assert cs.read_text().splitlines()[0] == (
        "recharge_count,total_transaction_amount,net_calculation_amount,before,after,recovered,recovered_pct"
    )
