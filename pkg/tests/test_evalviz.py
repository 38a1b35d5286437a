import math

import numpy as np
import pytest
import torch
from sklearn.metrics import silhouette_score

from genretag.data import GENRES, TrackRecord
from genretag.errors import EmptySplit, TooFewFolds, TooFewPoints
from genretag.evaluation import (
    EmbeddingRecord,
    FoldResult,
    aggregate_folds,
    emit_report,
    emit_scatter,
    evaluate,
    extract_embeddings,
    read_embeddings_jsonl,
    read_report_csv,
    summarize_regimes,
    write_embeddings_jsonl,
)
from genretag.tsne import tsne_project

from conftest import ToyFeatureSource


def toy_records(genres=GENRES[:3], per_genre=4, domain="real"):
    return [
        TrackRecord(path=f"toy://{domain}/{g}/{i}", genre=g, domain=domain, duration_s=30.0)
        for g in genres
        for i in range(per_genre)
    ]


class OracleNet:
    """Stand-in network emitting a configurable probability row per item; the
    perfect variant reads the class the toy source encodes in its pattern."""

    def __init__(self, mode: str, source: ToyFeatureSource | None = None, n_classes: int = 10):
        self.mode = mode
        self.n_classes = n_classes
        self._by_class = None
        if source is not None:
            self._by_class = np.stack([source._patterns[g].ravel() for g in GENRES])

    def eval(self):
        return self

    def __call__(self, x: torch.Tensor):
        batch = x.shape[0]
        emb = torch.zeros((batch, 8))
        if self.mode == "uniform":
            probs = torch.full((batch, self.n_classes), 1.0 / self.n_classes)
        else:  # nearest-pattern classifier over the toy features
            flat = x.reshape(batch, -1).numpy()
            probs = torch.zeros((batch, self.n_classes))
            for i, row in enumerate(flat):
                dists = ((self._by_class - row) ** 2).sum(axis=1)
                probs[i, int(dists.argmin())] = 1.0
        return emb, probs


class TestEvaluate:
    def test_perfect_predictions_accuracy_one(self, toy_source):
        records = toy_records()
        net = OracleNet("perfect", toy_source)
        result = evaluate(net, records, toy_source, fold_id=2)
        assert result.fold_id == 2
        assert result.accuracy == 1.0
        assert result.loss == 0.0

    def test_uniform_model_loss_ln10(self, toy_source):
        records = toy_records(genres=GENRES, per_genre=2)
        result = evaluate(OracleNet("uniform"), records, toy_source)
        assert result.loss == pytest.approx(math.log(10), rel=1e-6)
        # argmax of a uniform row is class 0, so accuracy equals its share
        assert result.accuracy == pytest.approx(0.1)

    def test_deterministic(self, toy_source):
        records = toy_records()
        net = OracleNet("perfect", toy_source)
        a = evaluate(net, records, toy_source)
        b = evaluate(net, records, toy_source)
        assert a == b

    def test_empty_split(self, toy_source):
        with pytest.raises(EmptySplit):
            evaluate(OracleNet("uniform"), [], toy_source)


class TestAggregate:
    def test_spec_example(self):
        results = [FoldResult(i, acc, 1.0) for i, acc in enumerate([0.4, 0.5, 0.6])]
        agg = aggregate_folds(results)
        assert agg.accuracy_mean == pytest.approx(0.5)
        assert agg.accuracy_std == pytest.approx(math.sqrt(0.02 / 3), rel=1e-9)
        assert agg.accuracy_std == pytest.approx(0.08165, abs=5e-6)

    def test_identical_folds_zero_std(self):
        results = [FoldResult(i, 0.42, 1.3) for i in range(3)]
        agg = aggregate_folds(results)
        assert agg.accuracy_std == 0.0 and agg.loss_std == 0.0
        assert agg.accuracy_mean == pytest.approx(0.42)

    def test_single_fold_rejected(self):
        with pytest.raises(TooFewFolds):
            aggregate_folds([FoldResult(0, 0.5, 1.0)])

    def test_result_validation(self):
        with pytest.raises(ValueError):
            FoldResult(0, 1.5, 1.0)
        with pytest.raises(ValueError):
            FoldResult(0, 0.5, -1.0)


class TestEmbeddings:
    def test_one_record_per_track_with_domain(self, toy_source):
        records = toy_records(per_genre=2) + toy_records(per_genre=1, domain="synthetic")
        out = extract_embeddings(OracleNet("uniform"), records, toy_source)
        assert len(out) == len(records)
        assert [r.domain for r in out] == [r.domain for r in records]
        assert all(r.embedding.shape == (8,) for r in out)

    def test_same_track_identical(self, toy_source):
        record = toy_records(per_genre=1)[0]
        out = extract_embeddings(OracleNet("uniform"), [record, record], toy_source)
        assert np.array_equal(out[0].embedding, out[1].embedding)

    def test_jsonl_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        records = [
            EmbeddingRecord(f"t{i}", "jazz", "real", rng.standard_normal(16).astype(np.float32))
            for i in range(5)
        ]
        path = write_embeddings_jsonl(tmp_path / "e.jsonl", records)
        loaded = read_embeddings_jsonl(path)
        assert [r.track_id for r in loaded] == [r.track_id for r in records]
        for a, b in zip(loaded, records):
            assert np.array_equal(a.embedding, b.embedding)

    def test_empty_raises(self, toy_source):
        with pytest.raises(EmptySplit):
            extract_embeddings(OracleNet("uniform"), [], toy_source)


class TestTsne:
    def test_output_shape(self):
        rng = np.random.default_rng(0)
        points = tsne_project(rng.standard_normal((40, 16)), iterations=150, seed=1)
        assert points.shape == (40, 2)
        assert np.isfinite(points).all()

    def test_too_few_points(self):
        with pytest.raises(TooFewPoints):
            tsne_project(np.zeros((4, 8)))

    def test_seed_determinism_bitwise(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((30, 8))
        a = tsne_project(x, iterations=120, seed=7)
        b = tsne_project(x, iterations=120, seed=7)
        assert np.array_equal(a, b)

    def test_separated_clusters_stay_separated(self):
        rng = np.random.default_rng(42)
        a = rng.standard_normal((60, 512)) * 0.05
        b = rng.standard_normal((60, 512)) * 0.05
        b[:, 0] += 10.0
        points = tsne_project(np.vstack([a, b]), perplexity=30, iterations=500, seed=3)
        labels = np.array([0] * 60 + [1] * 60)
        assert silhouette_score(points, labels) > 0.0

    def test_duplicated_rows_coincide(self):
        # Clustered input, the structure real embeddings have.
        rng = np.random.default_rng(5)
        centers = rng.standard_normal((4, 64)) * 6.0
        x = np.vstack([c + 0.3 * rng.standard_normal((20, 64)) for c in centers])
        doubled = np.vstack([x, x[:6]])
        points = tsne_project(doubled, perplexity=30, iterations=1000, seed=2)
        span = points.max() - points.min()
        gaps = np.linalg.norm(points[:6] - points[80:86], axis=1)
        assert np.all(gaps < 1e-3 * span)

    def test_small_n_auto_reduces_perplexity(self):
        rng = np.random.default_rng(6)
        points = tsne_project(rng.standard_normal((12, 8)), perplexity=30, iterations=100, seed=0)
        assert points.shape == (12, 2)


class TestReport:
    def _table_one_shaped(self):
        base = {
            "e2e-real": (0.467, 1.61),
            "e2e-synth": (0.906, 0.34),
            "e2e-add": (0.473, 1.74),
            "e2e-da": (0.476, 1.54),
            "tl": (0.526, 1.40),
            "ft": (0.548, 1.39),
        }
        rng = np.random.default_rng(0)
        return {
            kind: [
                FoldResult(fold, min(1.0, acc + 0.01 * fold), loss + 0.01 * fold)
                for fold in range(3)
            ]
            for kind, (acc, loss) in base.items()
        }

    def test_six_rows_in_paper_order(self, tmp_path):
        per_regime = self._table_one_shaped()
        text = emit_report(per_regime, tmp_path / "t.csv", tmp_path / "t.txt")
        rows = read_report_csv(tmp_path / "t.csv")
        assert [r.regime for r in rows] == ["e2e-real", "e2e-synth", "e2e-add", "e2e-da", "tl", "ft"]
        lines = text.strip().splitlines()
        assert len(lines) == 7
        assert [line.split()[0] for line in lines[1:]] == [
            "E2E-real", "E2E-synth", "E2E-add", "E2E-DA", "TL", "FT",
        ]
        assert (tmp_path / "t.txt").read_text() == text

    def test_csv_roundtrips_at_float32(self, tmp_path):
        per_regime = self._table_one_shaped()
        emit_report(per_regime, tmp_path / "t.csv")
        expected = summarize_regimes(per_regime)
        loaded = read_report_csv(tmp_path / "t.csv")
        for got, want in zip(loaded, expected):
            assert np.float32(got.accuracy_mean) == np.float32(want.accuracy_mean)
            assert np.float32(got.accuracy_std) == np.float32(want.accuracy_std)
            assert np.float32(got.loss_mean) == np.float32(want.loss_mean)
            assert np.float32(got.loss_std) == np.float32(want.loss_std)

    def test_subset_of_regimes(self, tmp_path):
        per_regime = {k: v for k, v in self._table_one_shaped().items() if k in ("tl", "e2e-real")}
        text = emit_report(per_regime, tmp_path / "t.csv")
        rows = read_report_csv(tmp_path / "t.csv")
        assert [r.regime for r in rows] == ["e2e-real", "tl"]
        assert "FT" not in text

    def test_unknown_regime_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report({"e2e-cool": [FoldResult(0, 0.5, 1.0)] * 2}, tmp_path / "t.csv")


class TestScatter:
    def _points(self, n=30):
        rng = np.random.default_rng(0)
        points = rng.standard_normal((n, 2))
        labels = [GENRES[i % 5] for i in range(n)]
        domains = ["real" if i % 2 else "synthetic" for i in range(n)]
        return points, labels, domains

    def test_svg_written_with_default_three_genres(self, tmp_path):
        points, labels, domains = self._points()
        out = emit_scatter(points, labels, domains, tmp_path / "p.svg")
        content = out.read_text()
        assert content.lstrip().startswith("<?xml")
        assert "<svg" in content
        present = sorted(set(labels))
        for genre in present[:3]:
            assert genre in content
        for genre in present[3:]:
            assert genre not in content

    def test_empty_filter_plots_all(self, tmp_path):
        points, labels, domains = self._points()
        out = emit_scatter(points, labels, domains, tmp_path / "p.svg", genres=[])
        content = out.read_text()
        for genre in set(labels):
            assert genre in content

    def test_explicit_subset(self, tmp_path):
        points, labels, domains = self._points()
        out = emit_scatter(points, labels, domains, tmp_path / "p.svg", genres=["blues", "disco"])
        content = out.read_text()
        assert "blues" in content and "disco" in content
        assert "country" not in content

    def test_zero_points_error(self, tmp_path):
        with pytest.raises(ValueError):
            emit_scatter(np.zeros((0, 2)), [], [], tmp_path / "p.svg")

    def test_absent_genres_error(self, tmp_path):
        points, labels, domains = self._points()
        with pytest.raises(ValueError):
            emit_scatter(points, labels, domains, tmp_path / "p.svg", genres=["metal"])

    def test_length_mismatch(self, tmp_path):
        points, labels, domains = self._points()
        with pytest.raises(ValueError):
            emit_scatter(points, labels[:-1], domains, tmp_path / "p.svg")
