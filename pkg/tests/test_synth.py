import hashlib

import numpy as np
import pytest

from conftest import tiny_gen_config, tiny_model_config
from ssc.harness import benchmark_gen_config, benchmark_experiment, train, evaluate
from ssc.metrics import instance_map
from ssc.model import InteractionModel
from ssc.synth import (SOURCES, DatasetFormatError, GenConfig, gen_dataset,
                       load_dataset, make_batch, relevant_source, save_dataset)


def _file_hash(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


class TestGenDeterminism:
    def test_same_seed_twice_gives_identical_files(self, tmp_path):
        cfg = tiny_gen_config(seed=7)
        p1, p2 = tmp_path / "a.ds", tmp_path / "b.ds"
        save_dataset(gen_dataset(cfg), str(p1))
        save_dataset(gen_dataset(tiny_gen_config(seed=7)), str(p2))
        assert _file_hash(p1) == _file_hash(p2)

    def test_different_seed_differs(self, tmp_path):
        a = gen_dataset(tiny_gen_config(seed=7)).checksum()
        b = gen_dataset(tiny_gen_config(seed=8)).checksum()
        assert a != b

    def test_split_is_pure_function_of_seed_and_id(self):
        short = gen_dataset(tiny_gen_config(num_images=20))
        long = gen_dataset(tiny_gen_config(num_images=40))
        for a, b in zip(short.images, long.images):
            assert a.split == b.split

    def test_splits_disjoint_by_id(self, tiny_dataset):
        train_ids = {im.id for im in tiny_dataset.split_images("train")}
        test_ids = {im.id for im in tiny_dataset.split_images("test")}
        assert not (train_ids & test_ids)
        assert len(train_ids) + len(test_ids) == len(tiny_dataset.images)


class TestGenStructure:
    def test_positive_label_unless_no_interaction(self, tiny_dataset):
        for im in tiny_dataset.images:
            assert im.labels.sum() >= 1
            if im.meta["interaction"] == "no":
                assert im.labels[tiny_dataset.config.no_interaction_category] == 1

    def test_relevant_context_names_a_source(self, tiny_dataset):
        for im in tiny_dataset.images:
            assert im.meta["relevant_context"] in SOURCES

    def test_relevance_table_category_mode(self):
        cfg = tiny_gen_config(relevance_mode="category")
        for c in range(cfg.s):
            assert relevant_source(cfg, c, 0) == relevant_source(cfg, c, 1)
            assert relevant_source(cfg, c, 0) == SOURCES[c % 4]

    def test_relevance_table_pair_mode_depends_on_group(self):
        cfg = tiny_gen_config(relevance_mode="pair")
        differs = sum(relevant_source(cfg, c, 0) != relevant_source(cfg, c, 1)
                      for c in range(cfg.s))
        assert differs == cfg.s

    def test_label_marginals_match_rare_fraction(self):
        cfg = GenConfig(seed=1, num_images=3000, s=12, n=2, d_ho=6, d_part=4,
                        map_channels=4, map_h=2, map_w=2, deform_dim=4,
                        rare_fraction=0.3, no_interaction_fraction=0.0)
        ds = gen_dataset(cfg)
        rare = sum(im.meta["frequency"] == "rare" for im in ds.images)
        p = rare / len(ds.images)
        sigma = np.sqrt(0.3 * 0.7 / len(ds.images))
        assert abs(p - 0.3) < 3 * sigma

    def test_no_shift_context_marginals_exchangeable(self):
        cfg = GenConfig(seed=2, num_images=2000, s=6, n=2, d_ho=6, d_part=4,
                        map_channels=4, map_h=2, map_w=2, deform_dim=4,
                        shift_fraction=0.0)
        ds = gen_dataset(cfg)

        def mean_deformation(split):
            vecs = np.stack([im.deformation for im in ds.split_images(split)])
            return vecs.mean(axis=0), len(vecs)

        m_tr, n_tr = mean_deformation("train")
        m_te, n_te = mean_deformation("test")
        pooled_sigma = np.sqrt(1.0 / n_tr + 1.0 / n_te) * 1.5  # conservative scale
        assert np.all(np.abs(m_tr - m_te) < 3 * pooled_sigma + 0.2)

    def test_shifted_tag_only_in_test_split(self):
        ds = gen_dataset(tiny_gen_config(shift_fraction=1.0, num_images=60))
        for im in ds.images:
            if im.split == "train":
                assert im.meta["shifted"] == "no"
            else:
                assert im.meta["shifted"] == "yes"

    def test_invalid_config_lists_every_violation(self):
        cfg = tiny_gen_config(num_images=0, shift_fraction=2.0, pair_noise=-1.0)
        with pytest.raises(ValueError) as err:
            cfg.validate()
        msg = str(err.value)
        assert "num_images" in msg and "shift_fraction" in msg and "pair_noise" in msg


class TestRoundTrip:
    def test_save_load_save_identical_bytes(self, tmp_path, tiny_dataset):
        p1, p2 = tmp_path / "a.ds", tmp_path / "b.ds"
        save_dataset(tiny_dataset, str(p1))
        save_dataset(load_dataset(str(p1)), str(p2))
        assert _file_hash(p1) == _file_hash(p2)

    def test_round_trip_checksum_1000_images(self, tmp_path):
        cfg = GenConfig(seed=9, num_images=1000, s=4, n=2, d_ho=4, d_part=3,
                        map_channels=3, map_h=2, map_w=2, deform_dim=3)
        ds = gen_dataset(cfg)
        path = str(tmp_path / "big.ds")
        save_dataset(ds, path)
        assert load_dataset(path).checksum() == ds.checksum()

    def test_values_exact_after_round_trip(self, tmp_path, tiny_dataset):
        path = str(tmp_path / "d.ds")
        save_dataset(tiny_dataset, path)
        loaded = load_dataset(path)
        for a, b in zip(tiny_dataset.images, loaded.images):
            np.testing.assert_array_equal(a.pairs, b.pairs)
            np.testing.assert_array_equal(a.feature_map, b.feature_map)
            np.testing.assert_array_equal(a.labels, b.labels)
            assert a.meta == b.meta

    def test_truncated_file_reports_line(self, tmp_path, tiny_dataset):
        path = tmp_path / "d.ds"
        save_dataset(tiny_dataset, str(path))
        lines = path.read_text().split("\n")
        path.write_text("\n".join(lines[:5]) + "\n")
        with pytest.raises(DatasetFormatError, match="line"):
            load_dataset(str(path))

    def test_malformed_field_reports_line_number(self, tmp_path, tiny_dataset):
        path = tmp_path / "d.ds"
        save_dataset(tiny_dataset, str(path))
        lines = path.read_text().split("\n")
        assert lines[3].startswith("field")
        lines[3] = lines[3].replace("shape=", "shape=9999x", 1)
        path.write_text("\n".join(lines))
        with pytest.raises(DatasetFormatError, match="line 4"):
            load_dataset(str(path))

    def test_end_marker_count_checked(self, tmp_path, tiny_dataset):
        path = tmp_path / "d.ds"
        save_dataset(tiny_dataset, str(path))
        text = path.read_text().replace(f"end images={len(tiny_dataset.images)}",
                                        "end images=999")
        path.write_text(text)
        with pytest.raises(DatasetFormatError, match="declares 999"):
            load_dataset(str(path))


class TestSignalLimits:
    def test_zero_snr_trained_model_near_chance(self):
        cfg = tiny_gen_config(signal_to_noise=0.0, num_images=300, seed=4,
                              second_label_prob=0.0, no_interaction_fraction=0.0)
        ds = gen_dataset(cfg)
        exp = benchmark_experiment("ho_only", "u", seed=0, out_dir="/tmp/ssc-test",
                                   epochs=6, decay_epoch=4, batch_size=32, lr=0.5)
        result = train(exp, dataset=ds)
        report = evaluate(result.model, ds, "test")
        # chance level for a uniform random ranking with one positive of S
        s = cfg.s
        chance = np.mean([(1.0 / r) for r in range(1, s + 1)])
        assert abs(report.map - chance) < 0.12

    def test_probe_on_relevant_source_hits_095(self):
        cfg = benchmark_gen_config(seed=11, shift_fraction=0.0, s=4,
                                   relevance_mode="category", signal_to_noise=4.0,
                                   second_label_prob=0.0, num_images=1200)
        ds = gen_dataset(cfg)

        def summary(im, source):
            if source == "body_part":
                return im.body_parts.mean(axis=0)
            if source == "stuff":
                return im.global_vec
            if source == "surround":
                return im.feature_map.reshape(-1, im.feature_map.shape[-1]).mean(axis=0)
            return im.deformation

        train_split, test_split = ds.split_images("train"), ds.split_images("test")
        scores = np.zeros((len(test_split), 4))
        for c in range(4):
            src = relevant_source(cfg, c, 0)
            x = np.stack([summary(im, src) for im in train_split])
            y = np.array([im.labels[c] for im in train_split], dtype=float)
            x1 = np.hstack([x, np.ones((len(x), 1))])
            w = np.linalg.lstsq(x1.T @ x1 + np.eye(x1.shape[1]), x1.T @ y, rcond=None)[0]
            xt = np.stack([summary(im, src) for im in test_split])
            scores[:, c] = np.hstack([xt, np.ones((len(xt), 1))]) @ w
        labels = np.stack([im.labels for im in test_split])
        m, _ = instance_map(scores, labels)
        assert m >= 0.95


class TestMakeBatch:
    def test_dimension_mismatch_detected(self, tiny_dataset):
        model = InteractionModel(tiny_model_config(d_ho=99))
        with pytest.raises(ValueError, match="d_ho"):
            make_batch(tiny_dataset.images[:2], model)

    def test_ho_only_skips_context_payloads(self, tiny_dataset):
        model = InteractionModel(tiny_model_config(variant="ho_only"))
        batch = make_batch(tiny_dataset.images[:2], model)
        assert "body_parts" not in batch and "pairs" in batch

    def test_unknown_provider_source_rejected(self, tiny_dataset):
        model = InteractionModel(tiny_model_config(
            extra_sources={"deformation": 7, "optical_flow": 3}))
        with pytest.raises(ValueError, match="optical_flow"):
            make_batch(tiny_dataset.images[:2], model)
