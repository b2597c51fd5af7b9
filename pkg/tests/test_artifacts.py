import numpy as np
import pytest

from vehids.artifacts import (
    content_hash,
    load_artifact,
    load_ensemble,
    load_manifest,
    load_model,
    load_quantile_map,
    save_artifact,
    save_ensemble,
    save_manifest,
    save_model,
    save_quantile_map,
)
from vehids.cnn import CnnConfig, build_cnn, predict_proba
from vehids.ensemble import build_averaging, build_concatenated, predict
from vehids.errors import ArtifactVersionError, ConfigError, CorruptArtifactError
from vehids.ingest import TrafficRecord
from vehids.transform import fit_quantile_map


@pytest.fixture()
def model():
    return build_cnn(CnnConfig(conv_blocks=(4,), dense_width=12, rng_seed=8),
                     (9, 9, 3), 3)


@pytest.fixture()
def qmap():
    rng = np.random.default_rng(39)
    recs = [TrafficRecord(float(i), tuple(row), 0)
            for i, row in enumerate(rng.normal(size=(200, 4)))]
    return fit_quantile_map(recs, n_quantiles=50, fit_source="test")


class TestRoundTrips:
    def test_model_save_load_save_identical_bytes(self, model, tmp_path):
        p1, p2 = tmp_path / "a.model", tmp_path / "b.model"
        save_model(model, p1)
        save_model(load_model(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_quantile_map_round_trip(self, qmap, tmp_path):
        p1, p2 = tmp_path / "a.qmap", tmp_path / "b.qmap"
        save_quantile_map(qmap, p1)
        loaded = load_quantile_map(p1)
        assert np.array_equal(loaded.references, qmap.references)
        assert loaded.clip_sigma == qmap.clip_sigma
        assert loaded.fit_source == qmap.fit_source
        save_quantile_map(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_manifest_round_trip(self, tmp_path):
        doc = {"version": 1, "seeds": {"seed": 7}, "outputs": {"x": "abc"}}
        path = tmp_path / "run.manifest"
        save_manifest(doc, path)
        assert load_manifest(path) == doc

    def test_save_artifact_dispatch(self, model, qmap, tmp_path):
        assert save_artifact(model, tmp_path / "m") == content_hash(tmp_path / "m")
        assert save_artifact(qmap, tmp_path / "q") == content_hash(tmp_path / "q")
        assert save_artifact({"version": 1}, tmp_path / "d") == content_hash(tmp_path / "d")
        with pytest.raises(ConfigError):
            save_artifact(object(), tmp_path / "nope")

    def test_load_artifact_dispatches_on_kind(self, model, qmap, tmp_path):
        save_model(model, tmp_path / "m")
        save_quantile_map(qmap, tmp_path / "q")
        assert isinstance(load_artifact(tmp_path / "m"), type(model))
        assert np.array_equal(load_artifact(tmp_path / "q").references, qmap.references)


class TestCorruption:
    def test_truncated_file_is_corruption_not_crash(self, model, tmp_path):
        path = tmp_path / "m.model"
        save_model(model, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CorruptArtifactError):
            load_model(path)

    def test_truncated_header(self, model, tmp_path):
        path = tmp_path / "m.model"
        save_model(model, path)
        path.write_bytes(path.read_bytes()[:10])
        with pytest.raises(CorruptArtifactError, match="truncated"):
            load_model(path)

    def test_flipped_payload_byte_detected(self, model, tmp_path):
        path = tmp_path / "m.model"
        save_model(model, path)
        data = bytearray(path.read_bytes())
        data[-1] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(CorruptArtifactError, match="hash"):
            load_model(path)

    def test_version_bump_is_explicit_upgrade_error(self, model, tmp_path):
        path = tmp_path / "m.model"
        save_model(model, path)
        data = bytearray(path.read_bytes())
        data[7] = 99  # container version u16 little-endian low byte
        path.write_bytes(bytes(data))
        with pytest.raises(ArtifactVersionError, match="version"):
            load_model(path)

    def test_wrong_kind_rejected(self, qmap, tmp_path):
        path = tmp_path / "q.qmap"
        save_quantile_map(qmap, path)
        with pytest.raises(CorruptArtifactError, match="expected model"):
            load_model(path)

    def test_not_an_artifact(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"x" * 100)
        with pytest.raises(CorruptArtifactError, match="magic"):
            load_model(path)


def three_base_models():
    return [
        build_cnn(CnnConfig(conv_blocks=(4,), dense_width=8, rng_seed=s), (9, 9, 3), 2)
        for s in (1, 2, 3)
    ]


class TestEnsembleArtifacts:
    def test_averaging_round_trip_predicts_identically(self, tmp_path):
        models = three_base_models()
        paths = []
        for i, m in enumerate(models):
            p = tmp_path / f"base{i}.model"
            save_model(m, p)
            paths.append(p)
        ens = build_averaging(models)
        epath = tmp_path / "avg.ensemble"
        save_ensemble(ens, epath, base_paths=paths)
        loaded = load_ensemble(epath, tmp_path)
        rng = np.random.default_rng(40)
        img = rng.integers(0, 256, size=(9, 9, 3)).astype(np.uint8)
        assert predict(loaded, img).combined == predict(ens, img).combined

    def test_concat_round_trip_predicts_identically(self, toy_black_white, tmp_path):
        x, y = toy_black_white
        models = three_base_models()
        paths = []
        for i, m in enumerate(models):
            p = tmp_path / f"base{i}.model"
            save_model(m, p)
            paths.append(p)
        cfg = CnnConfig(conv_blocks=(4,), dense_width=8, dropout_rate=0.2,
                        max_epochs=3, batch_size=32, rng_seed=5)
        ens = build_concatenated(models, (x, y), (x[:20], y[:20]), cfg)
        epath = tmp_path / "cat.ensemble"
        save_ensemble(ens, epath, base_paths=paths)
        loaded = load_ensemble(epath, tmp_path)
        img = x[3]
        assert predict(loaded, img).combined == predict(ens, img).combined

    def test_reference_hash_mismatch_detected(self, tmp_path):
        models = three_base_models()
        paths = []
        for i, m in enumerate(models):
            p = tmp_path / f"base{i}.model"
            save_model(m, p)
            paths.append(p)
        ens = build_averaging(models)
        epath = tmp_path / "avg.ensemble"
        save_ensemble(ens, epath, base_paths=paths)
        # overwrite one base with a different model
        save_model(build_cnn(CnnConfig(conv_blocks=(4,), dense_width=8, rng_seed=99),
                             (9, 9, 3), 2), paths[1])
        with pytest.raises(CorruptArtifactError, match="hash"):
            load_ensemble(epath, tmp_path)

    def test_missing_base_file(self, tmp_path):
        models = three_base_models()
        paths = []
        for i, m in enumerate(models):
            p = tmp_path / f"base{i}.model"
            save_model(m, p)
            paths.append(p)
        ens = build_averaging(models)
        epath = tmp_path / "avg.ensemble"
        save_ensemble(ens, epath, base_paths=paths)
        paths[0].unlink()
        with pytest.raises(CorruptArtifactError, match="missing"):
            load_ensemble(epath, tmp_path)

    def test_k3_strategy_references_three_hashes(self, tmp_path):
        models = three_base_models()
        paths = []
        for i, m in enumerate(models):
            p = tmp_path / f"base{i}.model"
            save_model(m, p)
            paths.append(p)
        epath = tmp_path / "avg.ensemble"
        save_ensemble(build_averaging(models), epath, base_paths=paths)
        import json, struct
        payload = epath.read_bytes()[struct.calcsize("<7sHBQ32s"):]
        (hlen,) = struct.unpack_from("<I", payload, 0)
        meta = json.loads(payload[4:4 + hlen])
        assert len(meta["base_hashes"]) == 3
        assert meta["base_hashes"] == [content_hash(p) for p in paths]
