"""Training loop: configuration, optimizer, state round trips, determinism,
and the two ablation drivers."""

import dataclasses
import json

import numpy as np
import pytest
import torch

from moclip import (
    ConfigurationError,
    LossConfig,
    TrainConfig,
    train,
)
from moclip.core import rng_stream
from moclip.checkpoint import CheckpointError
from moclip.data import AugmentConfig
from moclip.trainer import (
    BATCH_ABLATION_SIZES,
    LOSS_ABLATION_LABELS,
    AdamW,
    init_state,
    load_state,
    prepare,
    run_batch_ablation,
    run_loss_ablation,
    save_state,
    train_step,
)
from tests.conftest import tiny_config


def read_log(run_dir):
    with open(run_dir / "metrics.log") as fh:
        return [json.loads(line) for line in fh]


@pytest.fixture(scope="module")
def toy_train_data(tmp_path_factory):
    """Training split of the 2000-image, 4-disease set the defaults target.

    The loss-trajectory property needs enough steps per epoch that the
    queue warm-up phase stops dominating the epoch means; the small shared
    fixture is too short for that.
    """
    from moclip import SplitSpec, load_dataset, load_images, split
    from moclip.data import generate_synthetic_dataset
    from moclip.encoders import build_vocabulary
    from moclip.reports import default_template_table

    data_dir = tmp_path_factory.mktemp("toyset")
    generate_synthetic_dataset(data_dir, n=2000, n_diseases=4, seed=7)
    manifest, meta = load_dataset(data_dir)
    table = default_template_table()
    part = split(manifest, SplitSpec(), meta.seed)["train"]
    data = prepare(part, load_images(data_dir, part), table,
                   build_vocabulary(table), seed=meta.seed,
                   max_len=TrainConfig().max_len)
    return data, meta.pathologies, table


def one_batch(part, size=16):
    return (part.raw_images[:size], part.token_ids[:size],
            part.token_mask[:size])


class TestTrainConfig:
    def test_defaults_pin_the_training_recipe(self):
        config = TrainConfig()
        assert config.seed == 7
        assert config.epochs == 20
        assert config.batch_size == 32
        assert config.lr == 1e-4
        assert config.momentum == 0.999
        assert config.queue_capacity == 1024
        assert config.image_size == 32
        assert config.embed_dim == 64
        assert config.loss.tau_clip == 0.07
        assert config.loss.tau_moco == 0.07
        assert config.loss.aux_weight == 1.0
        assert config.loss.config_id == "A"

    @pytest.mark.parametrize("bad", [
        dict(epochs=-1),
        dict(batch_size=1),
        dict(lr=0.0),
        dict(weight_decay=-0.1),
        dict(momentum=1.5),
        dict(batch_size=32, queue_capacity=16),
        dict(embed_dim=4),
        dict(max_len=4),
    ])
    def test_rejects_invalid_values(self, bad):
        with pytest.raises(ConfigurationError):
            tiny_config(**bad)

    def test_dict_round_trip(self):
        config = tiny_config(
            loss=LossConfig.from_id("C", aux_weight=0.5),
            augment=AugmentConfig(flip_prob=0.0),
        )
        back = TrainConfig.from_dict(config.to_dict())
        assert back == config
        assert isinstance(back.loss, LossConfig)
        assert isinstance(back.augment, AugmentConfig)

    def test_unknown_keys_rejected_by_name(self):
        raw = tiny_config().to_dict()
        raw["warmup_steps"] = 100
        with pytest.raises(ConfigurationError, match="warmup_steps"):
            TrainConfig.from_dict(raw)

    def test_architectures_inherit_dimensions(self, small):
        config = tiny_config()
        arch = config.image_arch()
        assert (arch.image_size, arch.patch_size) == (16, 8)
        assert arch.embed_dim == config.embed_dim
        text = config.text_arch(small.vocab)
        assert text.max_len == config.max_len
        assert text.vocab == small.vocab.tokens


class TestAdamW:
    def test_single_step_matches_hand_formula(self):
        p = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
        opt = AdamW([p], lr=0.1, weight_decay=0.1)
        p.grad = torch.tensor([0.5, 0.25], dtype=torch.float64)
        before = p.detach().clone().numpy()
        g = p.grad.numpy()
        opt.step()
        m = 0.1 * g
        v = 0.001 * g * g
        expected = before * (1.0 - 0.1 * 0.1)
        expected -= 0.1 * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
        assert np.allclose(p.detach().numpy(), expected, atol=1e-15)
        assert opt.t == 1

    def test_matches_torch_adamw_over_several_steps(self):
        torch.manual_seed(0)
        init = torch.randn(6, 4, dtype=torch.float64)
        mine = torch.nn.Parameter(init.clone())
        theirs = torch.nn.Parameter(init.clone())
        opt_mine = AdamW([mine], lr=1e-2, weight_decay=1e-2)
        opt_theirs = torch.optim.AdamW([theirs], lr=1e-2, weight_decay=1e-2,
                                       betas=(0.9, 0.999), eps=1e-8)
        for step in range(5):
            grad = torch.randn(6, 4, dtype=torch.float64)
            mine.grad = grad.clone()
            theirs.grad = grad.clone()
            opt_mine.step()
            opt_theirs.step()
        assert torch.allclose(mine, theirs, atol=1e-12)

    def test_zero_gradient_still_decays_weights(self):
        p = torch.nn.Parameter(torch.tensor([2.0], dtype=torch.float64))
        opt = AdamW([p], lr=0.5, weight_decay=0.2)
        p.grad = torch.zeros(1, dtype=torch.float64)
        opt.step()
        assert float(p.detach()) == 2.0 * (1.0 - 0.5 * 0.2)

    def test_zero_grad_clears(self):
        p = torch.nn.Parameter(torch.ones(1, dtype=torch.float64))
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        p.grad = torch.ones(1, dtype=torch.float64)
        opt.zero_grad()
        assert p.grad is None


class TestPrepare:
    def test_length_mismatch_rejected(self, small):
        with pytest.raises(ConfigurationError, match="manifest rows"):
            prepare(small.splits["val"], small.images[:3], small.table,
                    small.vocab, seed=0, max_len=32)

    def test_reports_reflect_labels(self, small):
        part = small.parts["train"]
        manifest = small.splits["train"]
        for row, report in zip(manifest.rows, part.reports):
            for name in row.labels.names():
                assert small.table.entries[name].report_sentence in report

    def test_token_shapes_and_alignment(self, small):
        part = small.parts["val"]
        n = len(small.splits["val"])
        assert part.token_ids.shape == (n, 32)
        assert part.token_mask.shape == (n, 32)
        assert part.labels.shape[0] == n
        assert len(part.reports) == n
        assert np.array_equal(part.labels,
                              small.splits["val"].label_matrix())

    def test_reports_deterministic_per_row(self, small):
        manifest = small.splits["val"]
        images = np.zeros((len(manifest), 8, 8))
        a = prepare(manifest, images, small.table, small.vocab, seed=5,
                    max_len=32)
        b = prepare(manifest, images, small.table, small.vocab, seed=5,
                    max_len=32)
        assert a.reports == b.reports
        assert torch.equal(a.token_ids, b.token_ids)


class TestInitState:
    def test_momentum_twins_start_as_exact_copies(self, small):
        state = init_state(tiny_config(), small.pathologies, small.table)
        for pair in (state.image_pair, state.text_pair):
            for p_main, p_mom in zip(pair.main.parameters(),
                                     pair.momentum.parameters()):
                assert torch.equal(p_main, p_mom)
                assert not p_mom.requires_grad

    def test_optimizer_covers_exactly_the_main_parameters(self, small):
        state = init_state(tiny_config(), small.pathologies, small.table)
        expected = state.main_parameters()
        assert len(state.optimizer.params) == len(expected)
        for got, want in zip(state.optimizer.params, expected):
            assert got is want

    def test_text_queue_only_with_the_escape_flag(self, small):
        state = init_state(tiny_config(), small.pathologies, small.table)
        assert state.text_queue is None
        loss = dataclasses.replace(LossConfig.from_id("D"), use_text_queue=True)
        state_d = init_state(tiny_config(loss=loss), small.pathologies,
                             small.table)
        assert state_d.text_queue is not None
        assert state_d.text_queue.capacity == 64

    def test_queue_geometry_from_config(self, small):
        state = init_state(tiny_config(), small.pathologies, small.table)
        assert state.queue.capacity == 64
        assert state.queue.storage.shape == (64, 16)
        assert state.queue.fill == 0


class TestTrainStep:
    def test_gradient_flow_audit(self, small):
        state = init_state(tiny_config(), small.pathologies, small.table)
        config = state.config
        m = config.momentum
        mom_before = [p.detach().clone()
                      for p in state.image_pair.momentum.parameters()]
        main_before = [p.detach().clone()
                       for p in state.image_pair.main.parameters()]
        breakdown = train_step(state, *one_batch(small.parts["train"]),
                               rng_stream(0, "augment", 0, 0))
        assert bool(torch.isfinite(breakdown.total))
        main_after = list(state.image_pair.main.parameters())
        assert any(not torch.equal(b, a)
                   for b, a in zip(main_before, main_after))
        # momentum params moved by exactly the EMA formula, bitwise
        for old, new_main, mom in zip(mom_before, main_after,
                                      state.image_pair.momentum.parameters()):
            predicted = old.mul(m).add(new_main.detach(), alpha=1.0 - m)
            assert torch.equal(mom, predicted)

    def test_queue_growth_law(self, small):
        state = init_state(tiny_config(), small.pathologies, small.table)
        b, cap = 16, state.queue.capacity
        part = small.parts["train"]
        for s in range(1, 7):
            train_step(state, part.raw_images[:b], part.token_ids[:b],
                       part.token_mask[:b], rng_stream(0, "augment", 0, s))
            assert state.queue.fill == min(s * b, cap)
        assert state.queue.is_full

    def test_counters_advance(self, small):
        state = init_state(tiny_config(), small.pathologies, small.table)
        train_step(state, *one_batch(small.parts["train"]),
                   rng_stream(0, "augment", 0, 0))
        assert state.optimizer.t == 1


class TestTrainingRuns:
    def test_run_directory_contract(self, small, tmp_path):
        run_dir = tmp_path / "run"
        result = train(tiny_config(), small.parts["train"],
                       small.parts["val"], run_dir, small.pathologies,
                       small.table)
        assert (run_dir / "config").exists()
        assert (run_dir / "ckpt-final").exists()
        assert (run_dir / "ckpt-best").exists()
        assert result.best_path == run_dir / "ckpt-best"
        stored = json.loads((run_dir / "config").read_text())
        assert TrainConfig.from_dict(stored) == tiny_config()

        records = read_log(run_dir)
        steps = [r for r in records if r["kind"] == "step"]
        epochs = [r for r in records if r["kind"] == "epoch"]
        assert len(steps) == 2 * (len(small.parts["train"]) // 16)
        assert len(epochs) == 2
        assert [r["step"] for r in steps] == list(range(1, len(steps) + 1))
        for r in steps:
            assert set(r["loss_terms"]) == {
                "total", "contrastive", "image_queue", "image_consistency",
                "text_consistency", "text_queue",
            }
            assert r["lr"] == tiny_config().lr
        fills = [r["queue_fill"] for r in steps]
        assert fills == sorted(fills)
        for r in epochs:
            assert "val_macro_auc" in r and "val_macro_auc_diseases" in r
            assert "total" not in r["loss_terms"]
        assert result.history == epochs
        assert result.best_val_auc == max(r["val_macro_auc"] for r in epochs)

    def test_loss_decreases_across_epochs(self, toy_train_data, tmp_path):
        data, pathologies, table = toy_train_data
        for seed in (0, 1, 2):
            result = train(TrainConfig(seed=seed, epochs=5), data, None,
                           tmp_path / f"s{seed}", pathologies, table)
            losses = [r["train_loss"] for r in result.history]
            assert losses[4] < losses[0], f"seed {seed}: {losses}"

    def test_bitwise_repeatability(self, small, tmp_path):
        paths = []
        for name in ("a", "b"):
            run_dir = tmp_path / name
            train(tiny_config(), small.parts["train"], small.parts["val"],
                  run_dir, small.pathologies, small.table)
            paths.append(run_dir)
        first, second = paths
        assert ((first / "metrics.log").read_bytes()
                == (second / "metrics.log").read_bytes())
        assert ((first / "ckpt-final").read_bytes()
                == (second / "ckpt-final").read_bytes())
        assert ((first / "ckpt-best").read_bytes()
                == (second / "ckpt-best").read_bytes())

    def test_zero_epochs_writes_initial_state_only(self, small, tmp_path):
        run_dir = tmp_path / "zero"
        result = train(tiny_config(epochs=0), small.parts["train"],
                       small.parts["val"], run_dir, small.pathologies,
                       small.table)
        assert result.history == []
        assert result.best_path is None
        assert (run_dir / "ckpt-final").exists()
        assert (run_dir / "metrics.log").read_text() == ""
        loaded = load_state(run_dir / "ckpt-final")
        assert loaded.global_step == 0

    def test_too_few_samples_for_one_batch(self, small, tmp_path):
        with pytest.raises(ConfigurationError, match="batch"):
            train(tiny_config(batch_size=32), small.parts["val"], None,
                  tmp_path / "tiny", small.pathologies, small.table)

    def test_interrupted_run_resumes_bitwise(self, small, tmp_path):
        config = tiny_config()
        straight = tmp_path / "straight"
        train(config, small.parts["train"], small.parts["val"], straight,
              small.pathologies, small.table)

        resumed = tmp_path / "resumed"
        train(config, small.parts["train"], small.parts["val"], resumed,
              small.pathologies, small.table, stop_after_steps=5)
        train(config, small.parts["train"], small.parts["val"], resumed,
              small.pathologies, small.table,
              resume_from=resumed / "ckpt-final")

        assert ((straight / "ckpt-final").read_bytes()
                == (resumed / "ckpt-final").read_bytes())
        assert ((straight / "ckpt-best").read_bytes()
                == (resumed / "ckpt-best").read_bytes())
        straight_steps = [json.dumps(r) for r in read_log(straight)
                          if r["kind"] == "step"]
        resumed_steps = [json.dumps(r) for r in read_log(resumed)
                         if r["kind"] == "step"]
        assert straight_steps == resumed_steps

    def test_resume_rejects_changed_config(self, small, tmp_path):
        run_dir = tmp_path / "run"
        train(tiny_config(epochs=1), small.parts["train"], None, run_dir,
              small.pathologies, small.table)
        with pytest.raises(ConfigurationError, match="config"):
            train(tiny_config(epochs=1, lr=2e-4), small.parts["train"], None,
                  run_dir, small.pathologies, small.table,
                  resume_from=run_dir / "ckpt-final")


class TestStateRoundTrip:
    def test_next_step_is_bitwise_identical_after_reload(self, small, tmp_path):
        config = tiny_config(epochs=1)
        run_dir = tmp_path / "run"
        result = train(config, small.parts["train"], None, run_dir,
                       small.pathologies, small.table)
        path = tmp_path / "snapshot.ckpt"
        save_state(result.state, path)
        reloaded = load_state(path)

        batch = one_batch(small.parts["train"])
        a = train_step(result.state, *batch, rng_stream(0, "augment", 9, 0))
        b = train_step(reloaded, *batch, rng_stream(0, "augment", 9, 0))
        assert a.scalars() == b.scalars()
        for pair in ("image_pair", "text_pair"):
            mine = getattr(result.state, pair).main.parameters()
            theirs = getattr(reloaded, pair).main.parameters()
            for x, y in zip(mine, theirs):
                assert torch.equal(x, y)

    def test_progress_counters_survive(self, small, tmp_path):
        config = tiny_config(epochs=1)
        result = train(config, small.parts["train"], small.parts["val"],
                       tmp_path / "run", small.pathologies, small.table)
        loaded = load_state(result.final_path)
        assert loaded.epoch == 1
        assert loaded.global_step == result.state.global_step
        assert loaded.best_val_auc == result.state.best_val_auc
        assert loaded.optimizer.t == result.state.optimizer.t
        assert torch.equal(loaded.queue.negatives(),
                           result.state.queue.negatives())

    def test_wrong_kind_rejected(self, small, tmp_path):
        from moclip.checkpoint import save_checkpoint

        path = tmp_path / "other.ckpt"
        save_checkpoint(path, {"kind": "embedding_dump"}, {})
        with pytest.raises(CheckpointError, match="train"):
            load_state(path)

    def test_vocab_mismatch_rejected(self, small, tmp_path):
        config = tiny_config(epochs=0)
        result = train(config, small.parts["train"], None, tmp_path / "run",
                       small.pathologies, small.table)
        from moclip.checkpoint import load_checkpoint, save_checkpoint

        header, arrays = load_checkpoint(result.final_path)
        header["vocab"] = list(header["vocab"])[:-1]
        doctored = tmp_path / "doctored.ckpt"
        save_checkpoint(doctored, {k: v for k, v in header.items()
                                   if k != "arrays"}, arrays)
        with pytest.raises(CheckpointError, match="vocabulary"):
            load_state(doctored)


class TestAblations:
    def test_loss_ablation_shape_and_reproducibility(self, small, tmp_path):
        base = tiny_config(epochs=1)
        args = (base, small.parts["train"], None, small.parts["train"])
        first = run_loss_ablation(*args, tmp_path / "one", small.pathologies,
                                  small.table)
        ids = [row[0] for row in first.rows]
        assert ids == ["A", "B", "C", "D"]
        for config_id, label, auc in first.rows:
            assert label == LOSS_ABLATION_LABELS[config_id]
            assert 0.0 <= auc <= 1.0
        csv = first.to_csv()
        assert csv.splitlines()[0] == "config,description,mean_auc"
        assert len(csv.splitlines()) == 5
        text = first.render_text()
        assert text.count("*") == 1

        second = run_loss_ablation(*args, tmp_path / "two", small.pathologies,
                                   small.table)
        assert second.to_csv() == csv

    def test_batch_ablation_shape_and_metadata(self, small, tmp_path):
        base = tiny_config(epochs=1)
        result = run_batch_ablation(base, small.parts["train"], None,
                                    small.parts["train"], tmp_path / "one",
                                    small.pathologies, small.table,
                                    sizes=BATCH_ABLATION_SIZES)
        assert result.sizes == (16, 32)
        assert result.epochs == 1
        assert set(result.per_pathology) <= {"Pneumothorax", "Edema"}
        assert result.per_pathology, "no ablation rows scored"
        assert set(result.averages) == {16, 32}
        meta = result.metadata()
        assert meta["sizes"] == [16, 32]
        assert meta["budget"].startswith("epochs held constant")

        csv = result.to_csv()
        lines = csv.splitlines()
        assert lines[0] == "pathology,bs=16,bs=32"
        assert lines[-1].startswith("Average,")
        text = result.render_text()
        assert "(every batch size trained for 1 epochs)" in text
