import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import random_params
from sparsetdnn import trainer as tr
from sparsetdnn.frontend import SynthConfig, synth_dataset
from sparsetdnn.loss import AmSoftmaxConfig, GroupLassoConfig, total_loss
from sparsetdnn.model import Topology, init_params
from sparsetdnn.sparsity import CHUNK8, FILTER, SparsityMask, build_groups, group_norms, mask_from_weights


class TestSchedule:
    def test_paper_endpoints(self):
        cfg = tr.TrainConfig()
        assert cfg.epochs == 30 and cfg.weight_decay == 1e-6 and cfg.batch_size == 256
        assert cfg.segment_range == (2.5, 3.0)
        assert tr.cosine_lr(0, cfg) == 0.01
        assert tr.cosine_lr(29, cfg) == 0.0001

    def test_midpoint(self):
        cfg = tr.TrainConfig(epochs=31)
        assert math.isclose(tr.cosine_lr(15, cfg), (0.01 + 0.0001) / 2, rel_tol=1e-14)

    def test_non_increasing(self):
        cfg = tr.TrainConfig(epochs=20)
        lrs = [tr.cosine_lr(e, cfg) for e in range(20)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            tr.cosine_lr(30, tr.TrainConfig())

    @pytest.mark.parametrize("kw", [dict(lr_start=0.001, lr_end=0.01), dict(lr_end=0.0), dict(batch_size=0),
                                    dict(segment_range=(3.0, 2.0))])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            tr.TrainConfig(**kw)

    def test_presets(self):
        assert tr.PAPER_EPOCHS == {"baseline": 30, "sparsify": 20, "finetune": 20}
        cfg = tr.desk_config(tr.Sparsify(0.1, CHUNK8))
        assert cfg.epochs == tr.DESK_EPOCHS["sparsify"] and cfg.momentum == 0.0


class TestSgdStep:
    def grads(self, p, rng):
        return {k: rng.normal(size=v.shape) for k, v in p.tensors.items()}

    def test_zero_lr(self, small_params, rng):
        assert tr.sgd_step(small_params, self.grads(small_params, rng), 0.0, 1e-6) == small_params

    def test_decay_only(self, small_params):
        zero = {k: np.zeros_like(v) for k, v in small_params.tensors.items()}
        out = tr.sgd_step(small_params, zero, 0.1, 1e-6)
        for k, v in small_params.tensors.items():
            assert np.allclose(out.tensors[k], v * (1 - 0.1 * 1e-6), rtol=1e-15, atol=0)

    def test_frozen_groups_stay_zero(self, small_params, rng):
        part = build_groups(small_params.topology, CHUNK8)
        mask = SparsityMask(part, [rng.random((lg.rows, lg.per_row)) < 0.5 for lg in part.layers])
        from sparsetdnn.sparsity import apply_mask
        p = apply_mask(small_params, mask)
        out = tr.sgd_step(p, self.grads(p, rng), 0.5, 1e-6, tr.frozen_elements(mask))
        for layer, m in mask.element_masks().items():
            assert np.all(out.weight(layer)[m] == 0)
            assert np.any(out.weight(layer)[~m] != p.weight(layer)[~m])

    def test_non_finite_gradient(self, small_params, rng):
        g = self.grads(small_params, rng)
        g["tdnn3.bias"][0] = np.nan
        with pytest.raises(tr.DivergenceError) as info:
            tr.sgd_step(small_params, g, 0.1, 0.0)
        assert info.value.last_good is small_params


class TestSegments:
    def test_exact_min_length(self, rng):
        utt = rng.normal(size=(250, 40))
        assert np.array_equal(tr.sample_segment(utt, (2.5, 3.0), rng), utt)

    def test_floor_is_receptive_field(self, rng):
        utt = rng.normal(size=(100, 40))
        assert all(tr.sample_segment(utt, (0.01, 0.05), rng).shape[0] == 13 for _ in range(20))

    def test_deterministic(self):
        utt = np.arange(400 * 2, dtype=float).reshape(400, 2)
        a = [tr.sample_segment(utt, (1.0, 2.0), np.random.default_rng(5)) for _ in range(2)]
        assert np.array_equal(a[0], a[1])

    def test_uniform_lengths_and_starts(self):
        rng = np.random.default_rng(0)
        utt = np.arange(100, dtype=float)[:, None]
        lengths = [tr.sample_segment(utt, (0.2, 0.3), rng).shape[0] for _ in range(10_000)]
        counts = np.bincount(lengths, minlength=31)[20:31]
        assert set(lengths) == set(range(20, 31))
        assert chisquare(counts).pvalue > 1e-3
        starts = [int(tr.sample_segment(utt, (0.2, 0.3), rng, length=20)[0, 0]) for _ in range(10_000)]
        assert min(starts) == 0 and max(starts) == 80
        assert chisquare(np.bincount(starts, minlength=81)).pvalue > 1e-3


@pytest.fixture(scope="module")
def toy():
    ds = synth_dataset(SynthConfig(n_speakers=4, utts_per_speaker=4, frames_per_utt=(40, 60), seed=3))
    init = init_params(Topology.table1(1 / 16), 4, np.random.default_rng(0))
    return ds, init


def toy_cfg(stage, **kw):
    return tr.desk_config(stage, **{**dict(epochs=2, batch_size=8, segment_range=(0.2, 0.3)), **kw})


class TestRunStage:
    def test_deterministic(self, toy):
        ds, init = toy
        a = tr.run_stage(toy_cfg(tr.Baseline()), ds.feats, ds.labels, init)
        b = tr.run_stage(toy_cfg(tr.Baseline()), ds.feats, ds.labels, init)
        assert a.params == b.params

    def test_parallel_matches_serial(self, toy):
        ds, init = toy
        a = tr.run_stage(toy_cfg(tr.Baseline(), epochs=1), ds.feats, ds.labels, init)
        b = tr.run_stage(toy_cfg(tr.Baseline(), epochs=1, jobs=2), ds.feats, ds.labels, init)
        for k in a.params.tensors:
            assert np.allclose(a.params.tensors[k], b.params.tensors[k], rtol=0, atol=1e-10)

    def test_batch_gradient_reduction(self, toy):
        ds, init = toy
        x = np.stack([f[:20] for f in ds.feats[:6]]).astype(np.float64)
        y = ds.labels[:6]
        gl = GroupLassoConfig(0.01, build_groups(init.topology, CHUNK8))
        serial = total_loss(x, y, init, AmSoftmaxConfig(), gl)
        par = tr.batch_gradient(init, x, y, AmSoftmaxConfig(), gl, jobs=3)
        assert abs(serial[0] - par[0]) < 1e-12
        assert all(np.allclose(serial[1][k], par[1][k], rtol=0, atol=1e-12) for k in serial[1])

    def test_log_contents(self, toy):
        ds, init = toy
        res = tr.run_stage(toy_cfg(tr.Baseline(), epochs=3), ds.feats, ds.labels, init)
        assert [e.epoch for e in res.log] == [0, 1, 2]
        assert res.log[0].lr == 0.05 and res.log[-1].lr == 0.0005
        best = [e.best_loss for e in res.log]
        assert all(b <= a for a, b in zip(best, best[1:]))
        csv = tr.metrics_csv(res.log).splitlines()
        assert csv[0] == ",".join(tr.METRIC_FIELDS) and len(csv) == 4

    def test_lambda_zero_tau_zero(self, toy):
        ds, init = toy
        sp = tr.run_stage(toy_cfg(tr.Sparsify(0.0, CHUNK8, 0.0)), ds.feats, ds.labels, init)
        assert sum(sp.mask.zero_counts()) == 0
        fine = tr.run_stage(toy_cfg(tr.FineTune(sp.mask)), ds.feats, ds.labels, sp.params)
        cont = tr.run_stage(toy_cfg(tr.Baseline()), ds.feats, ds.labels, sp.params)
        assert fine.params == cont.params

    def test_sparsify_then_freeze(self, toy):
        ds, init = toy
        sp = tr.run_stage(toy_cfg(tr.Sparsify(2.0, FILTER, 0.05), lr_start=0.2), ds.feats, ds.labels, init)
        assert 0 < sp.mask.total_fraction() < 1
        assert mask_from_weights(sp.params, sp.mask.partition).union(sp.mask) == \
            mask_from_weights(sp.params, sp.mask.partition)
        fine = tr.run_stage(toy_cfg(tr.FineTune(sp.mask)), ds.feats, ds.labels, sp.params)
        for layer, m in sp.mask.element_masks().items():
            assert np.all(fine.params.weight(layer)[m] == 0)
        assert fine.log[-1].sparsity == sp.mask.fractions()

    def test_threshold_applied_once_at_end(self, toy):
        ds, init = toy
        sp = tr.run_stage(toy_cfg(tr.Sparsify(0.5, CHUNK8, 0.02)), ds.feats, ds.labels, init)
        norms = group_norms(sp.params, sp.mask.partition)
        for z, n in zip(sp.mask.zero, norms):
            assert np.all(n[z] == 0)

    def test_validation_keeps_best(self, toy):
        ds, init = toy
        from sparsetdnn.eval import make_trials
        val = tr.Validation(ds.feats, ds.utt_ids, make_trials(ds.utt_ids, ds.labels, 40, seed=1))
        res = tr.run_stage(toy_cfg(tr.Baseline(), epochs=3), ds.feats, ds.labels, init, val)
        assert all(not math.isnan(e.val_eer) for e in res.log)
        eer, _ = tr.evaluate(res.params, ds.feats, ds.utt_ids, val.trials)
        assert eer == min(e.val_eer for e in res.log)

    def test_divergence_keeps_last_good(self, toy):
        ds, init = toy
        feats = [f.copy() for f in ds.feats]
        for f in feats:
            f[:] = np.nan
        with pytest.raises(tr.DivergenceError) as info:
            tr.run_stage(toy_cfg(tr.Baseline()), feats, ds.labels, init)
        assert info.value.last_good == init

    def test_pipeline(self, toy):
        ds, init = toy
        cfgs = {name: toy_cfg(stage) for name, stage in
                (("baseline", tr.Baseline()), ("sparsify", tr.Sparsify(0.5, CHUNK8, 0.02)),
                 ("finetune", tr.Baseline()))}
        res = tr.run_pipeline(ds.feats, ds.labels, init, 0.5, CHUNK8, cfgs)
        assert res.finetuned.mask == res.sparse.mask
        for layer, m in res.sparse.mask.element_masks().items():
            assert np.all(res.finetuned.params.weight(layer)[m] == 0)
