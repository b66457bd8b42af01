import numpy as np
import pytest

from conftest import make_log, make_trace
from models.schemas import Task
from services.event_log import PAD_ID, SECONDS_PER_DAY, ActivityVocabulary, Event, Trace
from services.features import (
    FeatureScaler,
    PrefixSample,
    apply_scaler,
    build_dataset,
    dump_samples_csv,
    fit_scaler,
    generate_prefix_samples,
    load_samples_csv,
    temporal_features,
    unscale_sample,
)
from utils.errors import EmptyDataset, TraceTooLong, TraceTooShort

VOCAB = ActivityVocabulary(["A", "B", "C", "D"])


def _sample(fv=(0.0, 0.0, 0.0), next_delta=0.0, remaining=0.0) -> PrefixSample:
    return PrefixSample((1, 0), 1, tuple(fv), 2, next_delta, remaining, "c")


class TestTemporalFeatures:
    def test_single_event(self):
        assert temporal_features(make_trace("c", [("A", 3)])) == (0.0, 0.0, 0.0)

    def test_three_events(self):
        assert temporal_features(make_trace("c", [("A", 0), ("B", 5), ("C", 7)])) == (2.0, 7.0, 7.0)

    def test_two_events(self):
        assert temporal_features(make_trace("c", [("A", 0), ("B", 3)])) == (3.0, 0.0, 3.0)

    def test_fv_t3_spans_from_first_event(self):
        assert temporal_features(make_trace("c", [("A", 1), ("B", 2), ("C", 4), ("D", 8)])) == (4.0, 6.0, 7.0)


class TestGeneratePrefixSamples:
    def test_worked_example(self):
        samples = generate_prefix_samples(make_trace("c", [("A", 0), ("B", 2), ("C", 5)]), VOCAB, max_len=4)
        assert len(samples) == 2
        k2 = samples[1]
        assert k2.prefix_len == 2
        assert k2.encoded_prefix == (1, 2, PAD_ID, PAD_ID)
        assert k2.target_activity == VOCAB.encode("C")
        assert k2.target_next_delta == 3.0
        assert k2.target_remaining == 3.0
        assert k2.fv == (2.0, 0.0, 2.0)

    def test_minimal_trace(self):
        (sample,) = generate_prefix_samples(make_trace("c", [("A", 0), ("B", 1)]), VOCAB, max_len=2)
        assert sample.prefix_len == 1
        assert sample.fv == (0.0, 0.0, 0.0)
        assert sample.target_activity == VOCAB.encode("B")

    def test_length_fifteen(self):
        trace = make_trace("c", [("A", i) for i in range(15)])
        assert len(generate_prefix_samples(trace, VOCAB, max_len=15)) == 14

    def test_unknown_activity_encodes_as_unk(self):
        (sample,) = generate_prefix_samples(make_trace("c", [("Z", 0), ("A", 1)]), VOCAB, max_len=2)
        assert sample.encoded_prefix[0] == VOCAB.unk_id

    def test_too_short(self):
        with pytest.raises(TraceTooShort):
            generate_prefix_samples(make_trace("c", [("A", 0)]), VOCAB, max_len=3)

    def test_too_long(self):
        with pytest.raises(TraceTooLong):
            generate_prefix_samples(make_trace("c", [("A", i) for i in range(4)]), VOCAB, max_len=3)


class TestBuildDataset:
    def test_counts_and_skips(self):
        log = make_log([
            make_trace("a", [("A", 0), ("B", 1), ("C", 2)]),
            make_trace("b", [("A", 0)]),
            make_trace("c", [("A", 0), ("D", 1)]),
        ])
        dataset, stats = build_dataset(log, VOCAB, max_len=3)
        assert len(dataset) == 3
        assert stats.skipped_short == 1
        assert dataset.arrays.ids.shape == (3, 3)

    def test_long_traces_raise_unless_skipped(self):
        log = make_log([make_trace("a", [("A", i) for i in range(5)]), make_trace("b", [("A", 0), ("B", 1)])])
        with pytest.raises(TraceTooLong):
            build_dataset(log, VOCAB, max_len=3)
        dataset, stats = build_dataset(log, VOCAB, max_len=3, skip_long=True)
        assert (len(dataset), stats.skipped_long) == (1, 1)

    def test_regression_target_selection(self):
        log = make_log([make_trace("a", [("A", 0), ("B", 1), ("C", 4)])])
        arrays = build_dataset(log, VOCAB, max_len=3)[0].arrays
        np.testing.assert_array_equal(arrays.regression_target(Task.NEXT_TIME), [1.0, 3.0])
        np.testing.assert_array_equal(arrays.regression_target(Task.REMAINING_TIME), [4.0, 3.0])
        with pytest.raises(ValueError):
            arrays.regression_target(Task.NEXT_ACTIVITY)


class TestScaler:
    def test_population_std(self):
        scaler = fit_scaler([_sample(fv=(1.0, 0.0, 0.0)), _sample(fv=(3.0, 0.0, 0.0))])
        assert scaler.mean[0] == 2.0
        assert scaler.std[0] == 1.0

    def test_constant_dimension_gets_unit_std(self):
        scaler = fit_scaler([_sample(fv=(5.0, 5.0, 5.0))] * 3)
        assert scaler.mean[0] == 5.0
        np.testing.assert_array_equal(scaler.std, np.ones(5))

    def test_single_sample(self):
        np.testing.assert_array_equal(fit_scaler([_sample(fv=(1.0, 2.0, 3.0), next_delta=4.0)]).std, np.ones(5))

    def test_empty(self):
        with pytest.raises(EmptyDataset):
            fit_scaler([])

    def test_apply_at_mean_and_one_std(self):
        scaler = fit_scaler([_sample(fv=(1.0, 0.0, 0.0)), _sample(fv=(3.0, 0.0, 0.0))])
        assert apply_scaler(scaler, _sample(fv=(2.0, 0.0, 0.0))).fv[0] == 0.0
        assert apply_scaler(scaler, _sample(fv=(3.0, 0.0, 0.0))).fv[0] == 1.0

    def test_inverse_round_trip(self):
        scaler = FeatureScaler.from_dict({"mean": [2.0] * 5, "std": [1.5] * 5})
        sample = _sample(fv=(7.25, 7.25, 7.25), next_delta=7.25, remaining=7.25)
        back = unscale_sample(scaler, apply_scaler(scaler, sample))
        assert back.fv[0] == pytest.approx(7.25, rel=1e-12)
        assert back.target_remaining == pytest.approx(7.25, rel=1e-12)

    def test_target_scaling_uses_its_own_column(self):
        scaler = FeatureScaler.from_dict({"mean": [0, 0, 0, 10.0, 20.0], "std": [1, 1, 1, 2.0, 4.0]})
        assert scaler.scale_target(Task.NEXT_TIME, 12.0) == 1.0
        assert scaler.unscale_target(Task.REMAINING_TIME, 1.0) == 24.0

    def test_dict_round_trip(self):
        scaler = fit_scaler([_sample(fv=(1.0, 2.0, 4.0), next_delta=1.0), _sample(fv=(3.0, 1.0, 0.5))])
        again = FeatureScaler.from_dict(scaler.to_dict())
        np.testing.assert_array_equal(again.mean, scaler.mean)
        np.testing.assert_array_equal(again.std, scaler.std)


class TestSampleDump:
    def test_reload_matches(self, tmp_path):
        log = make_log([make_trace("a", [("A", 0), ("B", 1.25), ("C", 4.1)]), make_trace("b", [("D", 0), ("A", 1 / 3)])])
        dataset, _ = build_dataset(log, VOCAB, max_len=4)
        path = tmp_path / "samples.csv"
        dump_samples_csv(dataset.samples, path)
        again = load_samples_csv(path, len(VOCAB))
        assert again.samples == dataset.samples
        assert again.max_len == 4


def _random_log(rng: np.random.Generator, n_traces: int):
    labels = ["A", "B", "C", "D", "E", "F"]
    traces = []
    for i in range(n_traces):
        length = int(rng.integers(1, 9))
        gaps = rng.integers(0, 5 * 86400, size=length)
        gaps[0] = rng.integers(0, 365 * 86400)
        stamps = np.cumsum(gaps)
        case = f"r{i}"
        traces.append(Trace(case, tuple(Event(labels[rng.integers(len(labels))], case, int(t)) for t in stamps)))
    return make_log(traces, "random")


class TestFeatureProperties:
    """Invariants checked over 10,000 random traces."""

    @pytest.fixture(scope="class")
    def generated(self):
        rng = np.random.default_rng(2024)
        log = _random_log(rng, 10_000)
        vocab = ActivityVocabulary(["A", "B", "C", "D", "E", "F"])
        dataset, stats = build_dataset(log, vocab, max_len=log.max_trace_length)
        return log, vocab, dataset, stats

    def test_sample_count(self, generated):
        log, _, dataset, stats = generated
        assert len(dataset) == sum(max(len(t) - 1, 0) for t in log.traces)
        assert stats.skipped_short == sum(len(t) == 1 for t in log.traces)

    def test_targets_and_spans(self, generated):
        arrays = generated[2].arrays
        assert (arrays.target_next_delta >= 0).all()
        assert (arrays.target_remaining >= arrays.target_next_delta).all()
        assert (arrays.fv >= 0).all()
        assert (arrays.fv[:, 2] >= arrays.fv[:, 0]).all()
        assert (arrays.fv[:, 2] >= arrays.fv[:, 1]).all()

    def test_padding_layout(self, generated):
        arrays = generated[2].arrays
        positions = np.arange(arrays.ids.shape[1])[None, :]
        non_pad = arrays.ids != PAD_ID
        np.testing.assert_array_equal(non_pad, positions < arrays.prefix_len[:, None])

    def test_prefix_decodes_to_labels(self, generated):
        log, vocab, dataset, _ = generated
        by_case = {t.case_id: t for t in log.traces}
        for sample in dataset.samples[::7]:
            decoded = [vocab.decode(i) for i in sample.encoded_prefix[:sample.prefix_len]]
            assert decoded == by_case[sample.case_id].activities[:sample.prefix_len]

    def test_targets_match_timestamps(self, generated):
        log, _, dataset, _ = generated
        by_case = {t.case_id: t for t in log.traces}
        for sample in dataset.samples[::11]:
            stamps = by_case[sample.case_id].timestamps
            k = sample.prefix_len
            assert sample.target_next_delta == (stamps[k] - stamps[k - 1]) / SECONDS_PER_DAY
            assert sample.target_remaining == (stamps[-1] - stamps[k - 1]) / SECONDS_PER_DAY

    def test_scaling_inverts(self, generated):
        dataset = generated[2]
        scaler = fit_scaler(dataset.samples)
        rows = np.column_stack([dataset.arrays.fv, dataset.arrays.target_next_delta, dataset.arrays.target_remaining])
        back = scaler.inverse_transform(scaler.transform(rows))
        assert (np.abs(back - rows) <= 1e-9 * np.maximum(1.0, np.abs(rows))).all()
