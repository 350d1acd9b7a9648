import json
import logging
import struct
from dataclasses import replace

import numpy as np
import pytest

from madtp.config import ControllerConfig, DataConfig, RunConfig, VltConfig, save_config
from madtp.errors import (CorruptFileError, FormatError, InvalidArgument, NonConvergence,
                          NonFiniteLoss, NonStochasticError)
from madtp.harness import dump as dumpfmt
from madtp.harness.cli import main
from madtp.harness.export import export_report, mask_image, read_ppm, text_summary, write_ppm
from madtp.harness.runs import (build_model, dataset_for, matched_factory, planted_retention,
                                run_calibrate, run_simulate, run_stp_baseline, sign_test,
                                simulate)
from madtp.harness.synthetic import gen_synthetic, ground_truth
from madtp.harness.train import TorchMirror, numpy_loss, run_train_toy, toy_config
from madtp.mag import LearnableTokens, Mag, init_mag
from madtp.numerics import finite_diff_grad
from madtp.report import PruneReport
from madtp.vlt import init_weights

from oracles import prune_oracle


def small_config(**kw):
    model = VltConfig(layers=2, d_v=16, d_l=16, heads=4, n_patches=16, n_words=8,
                      n_learnable=4, d_k=8)
    data = DataConfig(n_concepts=8, min_planted=0, max_planted=2, patches_per_concept=4,
                      words_per_concept=2)
    base = dict(model=model, data=data, dataset_size=24, batch_size=8)
    base.update(kw)
    return RunConfig(**base)


class TestSynthetic:
    def test_zero_concepts_are_unmatched(self):
        cfg = small_config()
        ds = gen_synthetic(cfg.model, cfg.data, 10, 0, difficulty=0)
        assert np.all(ds.labels == 0) and all(len(p) == 0 for p in ds.planted_patches)

    def test_planted_counts_and_sidecar(self):
        cfg = small_config()
        ds = gen_synthetic(cfg.model, cfg.data, 6, 3, difficulty=2)
        side = ground_truth(ds)["pairs"]
        for i, pair in enumerate(side):
            assert len(pair["vision_tokens"]) == 8 and len(pair["language_tokens"]) == 4
            assert pair["vision_tokens"] == [int(p) + 1 for p in ds.planted_patches[i]]
            assert all(1 <= t <= 16 for t in pair["vision_tokens"])
            if pair["label"] == 0:
                assert not set(pair["vision_concepts"]) & set(pair["language_concepts"])
            else:
                assert pair["vision_concepts"] == pair["language_concepts"]

    def test_deterministic(self):
        cfg = small_config()
        a = gen_synthetic(cfg.model, cfg.data, 5, 7)
        b = gen_synthetic(cfg.model, cfg.data, 5, 7)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.texts, b.texts)
        assert a.concepts == b.concepts

    def test_too_many_concepts(self):
        cfg = small_config()
        with pytest.raises(InvalidArgument):
            gen_synthetic(cfg.model, cfg.data, 2, 0, difficulty=5)


class TestSimulate:
    def test_report_covers_dataset_in_order(self):
        cfg = small_config()
        sim = run_simulate(cfg)
        rep = sim.report
        assert [i.index for i in rep.instances] == list(range(24))
        assert rep.dataset_gflops == pytest.approx(np.mean([i.gflops for i in rep.instances]))
        ds = dataset_for(cfg)
        assert [i.difficulty for i in rep.instances] == list(ds.difficulty)
        assert rep.config["model"]["layers"] == 2

    def test_empty_dataset(self):
        rep = run_simulate(small_config(dataset_size=0)).report
        assert rep.instances == [] and rep.dataset_gflops is None

    def test_sorted_inference_only_reorders_batches(self):
        cfg = small_config(dataset_size=24).with_model(keep_policy="per-instance")
        model = build_model(cfg)
        plain = run_simulate(cfg, model=model).report
        sorted_ = run_simulate(replace(cfg, sorted_inference=True), model=model).report
        for a, b in zip(plain.instances, sorted_.instances):
            assert a.layers == b.layers and a.gflops == b.gflops

    def test_batch_size_one_not_costlier(self):
        cfg = small_config(dataset_size=32)
        model = build_model(cfg)
        one = run_simulate(replace(cfg, batch_size=1), model=model).report.dataset_gflops
        full = run_simulate(replace(cfg, batch_size=32), model=model).report.dataset_gflops
        assert one <= full


class TestStaticPruning:
    def test_k_zero_equals_disabled(self):
        cfg = small_config()
        stp = run_stp_baseline(cfg, 0).report
        off = run_simulate(cfg.with_model(pruning=False)).report
        for a, b in zip(stp.instances, off.instances):
            assert a.alive_counts("vision") == b.alive_counts("vision") == [17, 17, 17]
            assert a.gflops == b.gflops

    def test_k_one(self):
        rep = run_stp_baseline(small_config(), 1).report
        for inst in rep.instances:
            assert inst.alive_counts("vision") == [17, 16, 15]
            assert inst.alive_counts("language") == [9, 8, 7]

    def test_k_too_large(self):
        with pytest.raises(InvalidArgument):
            run_stp_baseline(small_config(), 8)
        with pytest.raises(InvalidArgument):
            run_stp_baseline(small_config(), -1)

    def test_matched_counts_reproduce_cost(self):
        cfg = small_config()
        model = build_model(cfg)
        ds = dataset_for(cfg)
        ref = simulate(cfg, ds, model).report
        for score in ("self", "cls", "tis"):
            other = simulate(cfg, ds, model, dtp_factory=matched_factory(cfg, ref, score)).report
            for a, b in zip(ref.instances, other.instances):
                assert a.alive_counts("vision") == b.alive_counts("vision")
                assert a.gflops == pytest.approx(b.gflops, rel=1e-12)

    def test_matched_tis_retention_matches_dynamic(self):
        cfg = small_config()
        model = build_model(cfg)
        ds = dataset_for(cfg)
        ref = simulate(cfg, ds, model).report
        other = simulate(cfg, ds, model, dtp_factory=matched_factory(cfg, ref, "tis")).report
        np.testing.assert_array_equal(planted_retention(ref, ds), planted_retention(other, ds))


class TestCalibrate:
    def test_converges_immediately_at_measured_ratio(self):
        cfg = small_config()
        model = build_model(cfg)
        ratio = run_simulate(cfg, model=model).report.reduce_ratio
        res = run_calibrate(cfg, ratio, model=model)
        assert res.converged and res.iterations == 0 and res.temperature == cfg.model.temperature

    def test_non_convergence_carries_trace(self):
        cfg = small_config(controller=ControllerConfig(max_iters=3))
        with pytest.raises(NonConvergence) as info:
            run_calibrate(cfg, 0.95)
        assert 1 <= len(info.value.trace) <= 4
        res = run_calibrate(cfg, 0.95, strict=False)
        assert not res.converged

    def test_empty_dataset(self):
        with pytest.raises(InvalidArgument):
            run_calibrate(small_config(dataset_size=0), 0.5)


class TestStatistics:
    def test_sign_test(self):
        assert sign_test(0, 0) == 1.0
        assert sign_test(5, 0) == 1 / 32
        assert sign_test(3, 3) == pytest.approx(42 / 64)
        assert sign_test(0, 4) == 1.0

    def test_retention_nan_without_planted(self):
        cfg = small_config()
        ds = gen_synthetic(cfg.model, cfg.data, 4, 0, difficulty=0)
        rep = simulate(cfg, ds, build_model(cfg)).report
        assert np.all(np.isnan(planted_retention(rep, ds)))


def _uniform_dump(n=5, k=2):
    d = dumpfmt.AttentionDump()
    rng = np.random.default_rng(0)
    for modality in ("vision", "language"):
        d.add(modality, "self", rng.dirichlet(np.ones(n), size=n))
        d.add(modality, "token", rng.dirichlet(np.ones(n), size=k))
    return d


class TestDump:
    def test_round_trip(self, tmp_path):
        d = _uniform_dump()
        dumpfmt.write_dump(d, tmp_path / "a.dmp")
        back = dumpfmt.read_dump(tmp_path / "a.dmp")
        assert [(e.modality, e.kind) for e in back.entries] == [(e.modality, e.kind) for e in d.entries]
        for a, b in zip(d.entries, back.entries):
            np.testing.assert_array_equal(a.matrix.astype(np.float32), b.matrix)
        checked = dumpfmt.ingest_attention_dump(tmp_path / "a.dmp")
        assert checked.entries[0].matrix.dtype == np.float64

    def test_bad_magic(self, tmp_path):
        (tmp_path / "a.dmp").write_bytes(b"NOTADUMP" + bytes(8))
        with pytest.raises(FormatError):
            dumpfmt.read_dump(tmp_path / "a.dmp")

    def test_bad_version(self, tmp_path):
        (tmp_path / "a.dmp").write_bytes(dumpfmt.MAGIC + struct.pack("<II", 9, 0))
        with pytest.raises(FormatError):
            dumpfmt.read_dump(tmp_path / "a.dmp")

    def test_truncated(self, tmp_path):
        dumpfmt.write_dump(_uniform_dump(), tmp_path / "a.dmp")
        data = (tmp_path / "a.dmp").read_bytes()
        (tmp_path / "b.dmp").write_bytes(data[:-4])
        with pytest.raises(CorruptFileError, match="expected"):
            dumpfmt.read_dump(tmp_path / "b.dmp")

    def test_renormalises_small_drift(self, tmp_path, caplog):
        d = dumpfmt.AttentionDump()
        d.add("vision", "self", np.full((4, 4), 0.25) * 1.001)
        dumpfmt.write_dump(d, tmp_path / "a.dmp")
        with caplog.at_level(logging.WARNING):
            out = dumpfmt.ingest_attention_dump(tmp_path / "a.dmp")
        np.testing.assert_allclose(out.entries[0].matrix.sum(axis=1), 1.0, atol=1e-12)
        assert "renormalising" in caplog.text

    @pytest.mark.parametrize("matrix", [np.full((3, 3), 0.5), np.array([[1.5, -0.5], [0.5, 0.5]])])
    def test_rejects_non_stochastic(self, tmp_path, matrix):
        d = dumpfmt.AttentionDump()
        d.add("vision", "self", matrix)
        dumpfmt.write_dump(d, tmp_path / "a.dmp")
        with pytest.raises(NonStochasticError):
            dumpfmt.ingest_attention_dump(tmp_path / "a.dmp")

    def test_token_map_width_mismatch(self, tmp_path):
        d = dumpfmt.AttentionDump()
        d.add("vision", "self", np.eye(3))
        d.add("vision", "token", np.full((1, 4), 0.25))
        dumpfmt.write_dump(d, tmp_path / "a.dmp")
        with pytest.raises(CorruptFileError):
            dumpfmt.ingest_attention_dump(tmp_path / "a.dmp")

    def test_replay_hand_built_layer(self):
        a_self = np.array([[0.5, 0.3, 0.2], [0.1, 0.8, 0.1], [0.2, 0.2, 0.6]])
        a_token = np.array([[0.1, 0.7, 0.2]])
        d = dumpfmt.AttentionDump()
        d.add("vision", "self", a_self)
        d.add("vision", "token", a_token)
        (dec,) = dumpfmt.replay(d, 2.0)
        tis, theta, keep = prune_oracle(a_self, a_token, 2.0)
        assert dec.theta == pytest.approx(theta, rel=1e-14)
        assert list(dec.keep) == keep

    def test_forward_dump_replays_recorded_decisions(self):
        cfg = small_config(batch_size=1)
        sim = run_simulate(replace(cfg, dataset_size=2))
        idx, result = sim.forwards[0]
        d = dumpfmt.from_forward(result, 0)
        decisions = dumpfmt.replay(d, cfg.model.temperature, "vision")
        recs = sim.report.instances[0].branch("vision")
        for dec, rec in zip(decisions, recs):
            assert dec.theta == pytest.approx(rec.theta, rel=1e-12)


class TestExport:
    def test_empty_report(self, tmp_path):
        export_report(PruneReport(), tmp_path)
        assert (tmp_path / "density.tsv").read_text().count("\n") == 1
        assert not (tmp_path / "masks").exists()
        assert "samples: 0" in text_summary(PruneReport())

    def test_images_per_layer_and_branch(self, tmp_path):
        cfg = small_config(dataset_size=2)
        rep = run_simulate(cfg).report
        export_report(rep, tmp_path, "text")
        masks = sorted(p.name for p in (tmp_path / "masks").iterdir())
        assert len([m for m in masks if m.startswith("pair00000_vision")]) == 2
        assert len([m for m in masks if m.startswith("pair00001_language")]) == 2
        img = read_ppm(tmp_path / "masks" / "pair00000_vision_layer0.ppm")
        assert img.shape == (32, 32, 3)
        assert (tmp_path / "masks" / "pair00000_words.txt").read_text().startswith("layer 0:")
        assert (tmp_path / "report.txt").exists()

    def test_ppm_round_trip(self, tmp_path):
        px = np.random.default_rng(0).integers(0, 256, size=(4, 6, 3)).astype(np.uint8)
        write_ppm(tmp_path / "a.ppm", px)
        np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), px)

    def test_pruned_cells_are_white(self):
        img = mask_image([0, 1, 4], 4)
        assert img.shape == (16, 16, 3)
        assert img[0, 0, 0] == 96 and img[0, 8, 0] == 255 and img[8, 8, 0] == 96

    def test_bad_format(self, tmp_path):
        with pytest.raises(ValueError):
            export_report(PruneReport(), tmp_path, "xml")


class TestCli:
    def test_simulate_report_ingest(self, tmp_path, capsys):
        cfg = small_config(dataset_size=4, batch_size=4)
        save_config(cfg, tmp_path / "c.json")
        out = tmp_path / "run"
        assert main(["simulate", "--config", str(tmp_path / "c.json"), "--out", str(out)]) == 0
        assert (out / "report.json").exists()
        assert main(["report", "--in", str(out), "--format", "json"]) == 0
        printed = capsys.readouterr().out
        assert json.loads(printed.split("\n", 1)[1] if printed.startswith("reduce") else
                          printed[printed.index("{"):])["schema"] == "madtp-report"
        dump = out / "dumps" / "pair00000.madtpdmp"
        assert main(["ingest", "--dump", str(dump), "--temperature", "1.0",
                     "--out", str(tmp_path / "ing")]) == 0
        assert len(json.loads((tmp_path / "ing" / "replay.json").read_text())) == 4

    def test_invalid_config_exit_2(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"schema": "madtp-config", "version": 1,
                                                    "model": {"layers": 0}}))
        assert main(["simulate", "--config", str(tmp_path / "c.json"),
                     "--out", str(tmp_path / "o")]) == 2

    def test_corrupt_dump_exit_2(self, tmp_path):
        (tmp_path / "x.dmp").write_bytes(b"garbage!" * 4)
        assert main(["ingest", "--dump", str(tmp_path / "x.dmp")]) == 2
        assert main(["ingest", "--dump", str(tmp_path / "missing.dmp")]) == 2

    def test_stp_too_large_exit_2(self, tmp_path):
        save_config(small_config(), tmp_path / "c.json")
        assert main(["stp", "--config", str(tmp_path / "c.json"), "--k", "9",
                     "--out", str(tmp_path / "o")]) == 2

    def test_calibrate_non_convergence_exit_3(self, tmp_path):
        cfg = small_config(dataset_size=8, controller=ControllerConfig(max_iters=2))
        save_config(cfg, tmp_path / "c.json")
        out = tmp_path / "cal"
        assert main(["calibrate", "--config", str(tmp_path / "c.json"), "--target-ratio", "0.95",
                     "--out", str(out)]) == 3
        assert json.loads((out / "calibration.json").read_text())["converged"] is False


class TestTrain:
    def setup_method(self):
        self.config = replace(toy_config(steps=0), dataset_size=16)

    def test_zero_steps(self, tmp_path):
        res = run_train_toy(self.config, tmp_path)
        assert res.history == [] and res.initial == res.final
        assert (tmp_path / "loss_summary.json").exists()

    def test_mirror_matches_numpy(self):
        for cross in (False, True):
            cfg = self.config.model if not cross else replace(self.config.model, cross_attention=True)
            ds = gen_synthetic(cfg, self.config.data, 6, 0)
            w, mag = init_weights(cfg), init_mag(cfg)
            want = numpy_loss(cfg, w, mag, ds.images, ds.texts, ds.labels)
            _, got = TorchMirror(cfg, w, mag).loss(ds.images, ds.texts, ds.labels)
            assert got.l_task == pytest.approx(want.l_task, rel=1e-12)
            assert got.l_sim == pytest.approx(want.l_sim, rel=1e-12)

    def test_gradient_of_learnable_tokens(self):
        cfg = VltConfig(layers=2, d_v=8, d_l=8, heads=2, n_patches=9, n_words=4,
                        n_learnable=2, d_k=8)
        data = DataConfig(n_concepts=4, min_planted=1, max_planted=1, patches_per_concept=3,
                          words_per_concept=2)
        ds = gen_synthetic(cfg, data, 3, 0)
        w, mag = init_weights(cfg), init_mag(cfg)
        mirror = TorchMirror(cfg, w, mag)
        total, _ = mirror.loss(ds.images, ds.texts, ds.labels)
        total.backward()
        analytic = mirror.params["E"].grad.numpy()

        def f(E):
            m = Mag(LearnableTokens(E), mag.projections)
            return numpy_loss(cfg, w, m, ds.images, ds.texts, ds.labels).total

        fd = finite_diff_grad(f, mag.tokens.E.copy())
        assert np.abs(analytic - fd).max() <= 1e-4 * max(np.abs(fd).max(), 1e-8)

    def test_non_finite_loss(self, tmp_path, monkeypatch):
        original = TorchMirror.loss

        def poisoned(self, *args, **kwargs):
            total, parts = original(self, *args, **kwargs)
            return total * float("nan"), replace(parts, total=float("nan"))

        monkeypatch.setattr(TorchMirror, "loss", poisoned)
        config = replace(self.config, train=replace(self.config.train, steps=3))
        with pytest.raises(NonFiniteLoss) as info:
            run_train_toy(config, tmp_path)
        assert info.value.state["step"] == 0
        assert (tmp_path / "nonfinite_state.json").exists()

    def test_empty_dataset(self):
        with pytest.raises(InvalidArgument):
            run_train_toy(replace(self.config, dataset_size=0))
