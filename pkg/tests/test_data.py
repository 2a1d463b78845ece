import numpy as np
import pytest

from phmm.data import (
    CsvSchema,
    ParseError,
    ProtocolError,
    Sample,
    Scaler,
    SchemaError,
    SeriesDataset,
    SynthSpec,
    fit_apply_scaling,
    generate_synth,
    load_csv,
    load_uea,
    planted4_spec,
    save_csv,
    save_uea,
    stock_protocol_split,
    stocklike_spec,
)

UEA_FIXTURE = """@problemName handcrafted
@timeStamps false
@data
1.0,2.0,3.0:10.0,20.0,30.0:apple
-1.5,0.5,2.5:0.0,0.25,0.5:banana
"""


class TestLoadUea:
    def test_handcrafted_fixture(self, tmp_path):
        path = tmp_path / "handcrafted.ts"
        path.write_text(UEA_FIXTURE)
        ds = load_uea(path)
        assert len(ds.samples) == 2
        assert ds.input_dim == 2
        assert ds.num_classes == 2
        np.testing.assert_array_equal(
            ds.samples[0].series, [[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]])
        np.testing.assert_array_equal(
            ds.samples[1].series, [[-1.5, 0.0], [0.5, 0.25], [2.5, 0.5]])
        assert ds.samples[0].label == 0  # 'apple' sorts first
        assert ds.samples[1].label == 1

    def test_empty_value_field_names_line(self, tmp_path):
        path = tmp_path / "bad.ts"
        path.write_text("@data\n1.0,,3.0:4.0,5.0,6.0:a\n")
        with pytest.raises(ParseError, match="line 2"):
            load_uea(path)

    def test_inconsistent_dims_rejected(self, tmp_path):
        path = tmp_path / "bad.ts"
        path.write_text("@data\n1.0,2.0:3.0,4.0:a\n1.0,2.0:b\n")
        with pytest.raises(ParseError, match="line 3"):
            load_uea(path)

    def test_unequal_lengths_padded_with_mask(self, tmp_path):
        path = tmp_path / "uneq.ts"
        path.write_text("@data\n1.0,2.0,3.0,4.0:a\n5.0,6.0:b\n")
        ds = load_uea(path)
        assert ds.samples[0].length == 4
        assert ds.samples[1].length == 2
        assert ds.samples[1].series.shape == (4, 1)
        np.testing.assert_array_equal(ds.samples[1].trimmed(), [[5.0], [6.0]])

    def test_train_test_pair(self, tmp_path):
        (tmp_path / "demo_TRAIN.ts").write_text("@data\n1.0,2.0:a\n")
        (tmp_path / "demo_TEST.ts").write_text("@data\n3.0,4.0:a\n")
        ds = load_uea(tmp_path / "demo_TRAIN.ts")
        assert len(ds.train_samples) == 1
        assert len(ds.test_samples) == 1
        np.testing.assert_array_equal(ds.test_samples[0].series, [[3.0], [4.0]])

    def test_roundtrip_full_precision(self, tmp_path):
        rng = np.random.default_rng(0)
        samples = [Sample(rng.standard_normal((5, 3)), i % 2) for i in range(4)]
        path = tmp_path / "rt.ts"
        save_uea(path, samples)
        ds = load_uea(path)
        for orig, loaded in zip(samples, ds.samples):
            np.testing.assert_array_equal(orig.series, loaded.series)


class TestLoadCsv:
    def _write(self, path, text):
        path.write_text(text)
        return path

    def test_single_id(self, tmp_path):
        path = self._write(tmp_path / "one.csv",
                           "id,t,a,b,label\n"
                           "s1,0,1.0,2.0,x\n"
                           "s1,1,3.0,4.0,x\n"
                           "s1,2,5.0,6.0,x\n"
                           "s1,3,7.0,8.0,x\n"
                           "s1,4,9.0,10.0,x\n")
        ds = load_csv(path, CsvSchema(id_col="id", time_col="t",
                                      value_cols=["a", "b"], label_col="label"))
        assert len(ds.samples) == 1
        assert ds.samples[0].series.shape == (5, 2)
        np.testing.assert_array_equal(ds.samples[0].series[2], [5.0, 6.0])

    def test_interleaved_ids_order_independent(self, tmp_path):
        rows = ["s1,0,1.0,x", "s2,0,10.0,y", "s1,1,2.0,x", "s2,1,20.0,y"]
        a = self._write(tmp_path / "a.csv", "id,t,v,label\n" + "\n".join(rows) + "\n")
        b = self._write(tmp_path / "b.csv",
                        "id,t,v,label\n" + "\n".join(rows[::-1]) + "\n")
        schema = CsvSchema(id_col="id", time_col="t", value_cols=["v"],
                           label_col="label")
        da, db = load_csv(a, schema), load_csv(b, schema)
        for sa, sb in zip(da.samples, db.samples):
            np.testing.assert_array_equal(sa.series, sb.series)
            assert sa.label == sb.label

    def test_missing_label_column_for_classification(self, tmp_path):
        path = self._write(tmp_path / "c.csv", "id,t,v\ns1,0,1.0\n")
        with pytest.raises(SchemaError):
            load_csv(path, CsvSchema(id_col="id", time_col="t", value_cols=["v"]),
                     task="classification")

    def test_missing_columns(self, tmp_path):
        path = self._write(tmp_path / "d.csv", "id,t\ns1,0\n")
        with pytest.raises(SchemaError, match="missing columns"):
            load_csv(path, CsvSchema(id_col="id", time_col="t", value_cols=["v"],
                                     label_col="label"))

    def test_non_numeric_value(self, tmp_path):
        path = self._write(tmp_path / "e.csv",
                           "id,t,v,label\ns1,0,abc,x\n")
        with pytest.raises(ParseError, match="line 2"):
            load_csv(path, CsvSchema(id_col="id", time_col="t", value_cols=["v"],
                                     label_col="label"))

    def test_forecasting_labels_are_trailing_steps(self, tmp_path):
        lines = ["id,t,v"] + [f"s1,{t},{float(t)}" for t in range(10)]
        path = self._write(tmp_path / "f.csv", "\n".join(lines) + "\n")
        ds = load_csv(path, CsvSchema(id_col="id", time_col="t", value_cols=["v"]),
                      task="forecasting", horizon=3)
        s = ds.samples[0]
        assert s.series.shape == (7, 1)
        np.testing.assert_array_equal(np.asarray(s.label).ravel(), [7.0, 8.0, 9.0])


class TestScaling:
    def test_scaler_roundtrip(self):
        rng = np.random.default_rng(1)
        sc = Scaler(mean=np.array([1.0, -2.0]), std=np.array([2.0, 0.5]))
        x = rng.normal(size=(7, 2))
        np.testing.assert_allclose(sc.inverse(sc.transform(x)), x, atol=1e-12)

    def test_train_statistics_after_scaling(self):
        rng = np.random.default_rng(2)
        samples = [Sample(5.0 + 3.0 * rng.standard_normal((20, 3)), 0)
                   for _ in range(10)]
        ds = SeriesDataset(samples, num_classes=1)
        fit_apply_scaling(ds)
        stacked = np.concatenate([s.series for s in ds.train_samples])
        np.testing.assert_allclose(stacked.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(stacked.std(axis=0), 1.0, atol=1e-9)

    def test_constant_dimension_maps_to_zero(self):
        series = np.column_stack([np.full(6, 3.0), np.arange(6.0)])
        ds = SeriesDataset([Sample(series, 0)], num_classes=1)
        fit_apply_scaling(ds)
        np.testing.assert_allclose(ds.samples[0].series[:, 0], 0.0, atol=1e-12)

    def test_test_split_does_not_influence_scaler(self):
        train = Sample(np.zeros((4, 1)), 0, "train")
        test = Sample(np.full((4, 1), 100.0), 0, "test")
        ds = SeriesDataset([train, test], num_classes=1)
        fit_apply_scaling(ds)
        assert ds.scaler.mean[0] == 0.0

    def test_double_application_is_idempotent(self):
        rng = np.random.default_rng(3)
        raw = [4.0 + 2.0 * rng.standard_normal((10, 2)) for _ in range(5)]
        ds = SeriesDataset([Sample(x.copy(), 0) for x in raw], num_classes=1)
        fit_apply_scaling(ds)
        once = [s.series.copy() for s in ds.samples]
        inv_once = ds.scaler
        fit_apply_scaling(ds)
        for a, b in zip(once, [s.series for s in ds.samples]):
            np.testing.assert_allclose(a, b, atol=1e-9)
        # composed inverse still maps back to original units
        np.testing.assert_allclose(ds.scaler.inverse(ds.samples[0].series),
                                   raw[0], atol=1e-9)
        np.testing.assert_allclose(inv_once.inverse(once[0]), raw[0], atol=1e-12)


class TestStockProtocolSplit:
    def test_200_point_split(self):
        series = np.arange(200.0).reshape(200, 1)
        ctx, target = stock_protocol_split(series)
        assert ctx.shape == (160, 1) and target.shape == (40, 1)
        assert ctx[-1, 0] == 159.0 and target[0, 0] == 160.0

    def test_wrong_length_rejected(self):
        with pytest.raises(ProtocolError):
            stock_protocol_split(np.zeros((199, 1)))

    def test_concatenation_restores_original(self):
        rng = np.random.default_rng(4)
        series = rng.normal(size=(200, 2))
        ctx, target = stock_protocol_split(series)
        np.testing.assert_array_equal(np.concatenate([ctx, target]), series)


class TestGenerateSynth:
    def _spec(self, **kw):
        base = dict(regime_count=2, regime_durations=[4, 4],
                    emission_means=[[1.0], [-1.0]],
                    emission_stds=[[0.0], [0.0]],
                    transition=[[0.5, 0.5], [0.5, 0.5]],
                    T=16, D=1, n_train=4, n_test=2, seed=0)
        base.update(kw)
        return SynthSpec(**base)

    def test_single_regime_zero_noise_is_constant(self):
        spec = self._spec(regime_count=1, regime_durations=[4],
                          emission_means=[[2.5]], emission_stds=[[0.0]],
                          transition=[[1.0]])
        ds, regimes = generate_synth(spec)
        for s in ds.samples:
            np.testing.assert_array_equal(s.series, np.full((16, 1), 2.5))
        assert np.all(regimes == 0)

    def test_duration_four_gives_four_blocks(self):
        ds, regimes = generate_synth(self._spec())
        for row in regimes:
            blocks = [row[i : i + 4] for i in range(0, 16, 4)]
            for b in blocks:
                assert len(set(b.tolist())) == 1  # constant within a block

    def test_empirical_regime_means(self):
        spec = self._spec(T=32, n_train=1000, n_test=0,
                          emission_stds=[[0.5], [0.5]])
        ds, regimes = generate_synth(spec)
        xs = np.stack([s.series for s in ds.samples])  # (n, T, 1)
        for r, mu in ((0, 1.0), (1, -1.0)):
            sel = regimes == r
            count = sel.sum()
            sample_mean = xs[..., 0][sel].mean()
            tol = 3 * 0.5 / np.sqrt(count)
            assert abs(sample_mean - mu) <= tol

    def test_deterministic_given_seed(self):
        a, ra = generate_synth(self._spec(emission_stds=[[0.3], [0.3]]))
        b, rb = generate_synth(self._spec(emission_stds=[[0.3], [0.3]]))
        assert np.array_equal(ra, rb)
        for sa, sb in zip(a.samples, b.samples):
            assert np.array_equal(sa.series, sb.series)

    def test_dominant_regime_labels(self):
        ds, regimes = generate_synth(self._spec(n_train=50, n_test=0))
        for s, row in zip(ds.samples, regimes):
            counts = np.bincount(row, minlength=2)
            if counts[0] != counts[1]:
                assert s.label == int(np.argmax(counts))
            else:
                assert s.label == int(row[-1])

    def test_invalid_transition_rejected(self):
        with pytest.raises(ParseError):
            self._spec(transition=[[0.7, 0.7], [0.5, 0.5]])

    def test_walk_mode_accumulates(self):
        spec = self._spec(regime_count=1, regime_durations=[4],
                          emission_means=[[1.0]], emission_stds=[[0.0]],
                          transition=[[1.0]], walk=True)
        ds, _ = generate_synth(spec)
        np.testing.assert_array_equal(ds.samples[0].series[:, 0],
                                      np.arange(1.0, 17.0))

    def test_spec_json_roundtrip(self, tmp_path):
        spec = stocklike_spec(seed=3)
        path = tmp_path / "spec.json"
        spec.save(path)
        assert SynthSpec.load(path) == spec


class TestCsvRoundtrip:
    def test_classification_roundtrip(self, tmp_path):
        ds, _ = generate_synth(planted4_spec(seed=5))
        ds.samples = ds.samples[:20] + ds.test_samples[:10]
        path = tmp_path / "ds.csv"
        save_csv(path, ds)
        loaded = load_csv(path, CsvSchema(id_col="id", time_col="t",
                                          value_cols=["v0", "v1", "v2"],
                                          label_col="label", split_col="split"))
        assert len(loaded.samples) == len(ds.samples)
        for a, b in zip(ds.samples, loaded.samples):
            np.testing.assert_array_equal(a.series, b.series)
            assert a.label == b.label
            assert a.split == b.split

    def test_forecasting_roundtrip(self, tmp_path):
        ds, _ = generate_synth(stocklike_spec(seed=6))
        ds.samples = ds.samples[:5]
        path = tmp_path / "fc.csv"
        save_csv(path, ds)
        loaded = load_csv(path, CsvSchema(id_col="id", time_col="t",
                                          value_cols=["v0"], split_col="split"),
                          task="forecasting", horizon=40)
        for a, b in zip(ds.samples, loaded.samples):
            np.testing.assert_array_equal(a.series, b.series)
            np.testing.assert_array_equal(np.asarray(a.label), np.asarray(b.label))


class TestMaskContract:
    def test_mask_must_be_trailing(self):
        with pytest.raises(ParseError):
            Sample(np.zeros((4, 1)), 0, mask=np.array([True, False, True, True]))

    def test_padded_loss_equals_truncated(self):
        from phmm.model import ModelConfig, PhmmModel, ZeroNoise
        from phmm.training import elbo_batch

        rng = np.random.default_rng(8)
        model = PhmmModel(ModelConfig(k=2, m=2, input_dim=2, hidden_dim=4,
                                      attn_dim=4, num_classes=2,
                                      decoder_hidden_dim=4), seed=0)
        series = rng.normal(size=(6, 2))
        padded = Sample(np.vstack([series, np.zeros((2, 2))]), 1,
                        mask=np.array([True] * 6 + [False] * 2))
        truncated = Sample(series.copy(), 1)
        v_pad, _ = elbo_batch(model, padded.trimmed()[None], np.array([1]),
                              1.0, ZeroNoise())
        v_cut, _ = elbo_batch(model, truncated.trimmed()[None], np.array([1]),
                              1.0, ZeroNoise())
        assert v_pad.item() == v_cut.item()
