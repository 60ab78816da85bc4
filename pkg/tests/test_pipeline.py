import logging

import numpy as np
import pytest

from errors import ConfigError, ContractError
from services.data_service import Bag, negatives, positives
from services.evidential_head import (
    ANOMALY,
    NORMAL,
    evidence_forward,
    init_head,
    mil_loss_value,
    select_clean,
    thresholds_for_bag,
)
from services.flow_service import init_flow, nf_loss, retained_count
from services.graph_encoder import build_bag_graph, encode_bag, init_encoder, sample_triplets, triplet_loss_value
from services.pipeline_service import (
    _BestKeeper,
    build_graphs,
    draw_pseudo,
    early_stop,
    evaluate_detector,
    flow_scores,
    load_detector,
    optimizer_state,
    run_training,
    score_video,
    stage1_loss,
    stage1_warmup,
    stage2_train_flow,
    stage3_finetune,
    stage3_loss,
    validation_metric,
)
from settings import build_config
from storage import load_checkpoint
from utils.autodiff import Tensor
from utils.hashing import params_hash
from utils.optim import Adam


# -----------------------------------
# Early stopping / validation
# -----------------------------------
@pytest.mark.parametrize(
    "history, patience, expected",
    [
        ([0.1, 0.2, 0.3, 0.4], 2, False),
        ([0.5, 0.5, 0.5], 2, True),
        ([0.5, 0.4, 0.3, 0.6], 2, False),
        ([0.9, 0.4], 1, True),
        ([], 3, False),
    ],
)
def test_early_stop(history, patience, expected):
    assert early_stop(history, patience) is expected


def test_early_stop_patience_contract():
    with pytest.raises(ContractError):
        early_stop([0.1], 0)


def test_validation_metric_falls_back_to_bag_level():
    bags = [
        Bag("a", np.zeros((3, 2)), 1, None, "class_0"),
        Bag("b", np.zeros((3, 2)), 0),
    ]
    scores = {"a": np.array([0.1, 0.9, 0.2]), "b": np.array([0.3, 0.4, 0.2])}
    assert validation_metric(bags, scores) == 1.0
    assert validation_metric([bags[1]], scores) is None
    assert validation_metric([], scores) is None


def test_validation_metric_counts_held_out_pseudo_anomalies():
    bags = [
        Bag("n", np.zeros((4, 2)), 0, np.zeros(4, dtype=np.int64)),
        Bag("p", np.zeros((2, 2)), 1, np.array([1, 0]), "class_0"),
    ]
    scores = {"n": np.array([0.1, 0.2, 0.3, 0.4]), "p": np.array([0.9, 0.2])}
    assert validation_metric(bags, scores) == 1.0
    # a pseudo anomaly scored 0.25 beats three of the five normals
    assert validation_metric(bags, scores, np.array([0.25])) == pytest.approx((1.0 + 3 / 5) / 2)
    assert validation_metric([bags[0]], scores, np.array([0.5])) == 1.0
    assert validation_metric([bags[0]], scores, np.array([])) is None


def test_best_keeper_prefers_later_ties():
    w = Tensor(np.zeros((1, 1)), requires_grad=True)
    keeper = _BestKeeper({"w": w})
    for value, metric in [(1.0, 0.5), (2.0, 0.9), (3.0, 0.9), (4.0, 0.1)]:
        w.values = np.array([[value]])
        keeper.update(metric)
    keeper.restore()
    assert w.values[0, 0] == 3.0


# -----------------------------------
# Scoring
# -----------------------------------
def test_zero_evidence_head_scores_one_half(rng):
    encoder = init_encoder(4, 3, rng)
    head = init_head(encoder.out_dim, 5, rng, evidence_bias=0.0)
    assert np.array_equal(score_video(rng.normal(size=(7, 4)), encoder, head), np.full(7, 0.5))


def test_scores_stay_in_unit_interval(rng):
    encoder = init_encoder(4, 3, rng)
    head = init_head(encoder.out_dim, 5, rng)
    head.w2.values[:] = rng.normal(scale=5.0, size=head.w2.shape)
    scores = score_video(rng.normal(scale=3.0, size=(20, 4)), encoder, head)
    assert np.all((scores >= 0.0) & (scores <= 1.0))


# -----------------------------------
# Stage 1
# -----------------------------------
def test_stage1_loss_is_mil_plus_beta_triplet(tiny_config, tiny_bags):
    cfg = tiny_config.model_copy(update={"training": tiny_config.training.model_copy(update={"beta": 0.5})})
    rng = np.random.default_rng(0)
    pos, neg = positives(tiny_bags)[:2], negatives(tiny_bags)[:2]
    graphs = build_graphs(pos + neg, cfg)
    encoder = init_encoder(4, cfg.encoder.hidden_dim, rng)
    head = init_head(encoder.out_dim, cfg.head.hidden_dim, rng)
    head.w2.values[:] = rng.normal(size=head.w2.shape)

    terms = stage1_loss(pos, neg, encoder, head, cfg, graphs, np.random.default_rng(5), progress=1.0)

    rows, omega_rows, normal_rows, encoded = [], [], [], []
    offset = 0
    for bag in pos + neg:
        h = encode_bag(graphs[bag.id], encoder)
        evidence = evidence_forward(h, head)
        if bag.is_positive:
            omega = select_clean(evidence, thresholds_for_bag(bag.n, cfg.selection, 1.0)).omega
            rows += [mil_loss_value(evidence[i], ANOMALY) for i in omega]
            omega_rows += [offset + i for i in omega]
        else:
            rows += [mil_loss_value(ev, NORMAL) for ev in evidence]
            normal_rows += list(range(offset, offset + bag.n))
        encoded.append(h)
        offset += bag.n
    h_all = np.vstack(encoded)
    triplets = sample_triplets(omega_rows, normal_rows, cfg.training.triplets_per_step, np.random.default_rng(5))
    trip = np.mean([
        triplet_loss_value(h_all[[a]], h_all[[p]], h_all[[n]], cfg.training.margin) for a, p, n in triplets
    ])

    assert terms.omega == len(omega_rows)
    assert terms.mil.item() == pytest.approx(np.mean(rows), abs=1e-12)
    assert terms.triplet.item() == pytest.approx(trip, abs=1e-12)
    assert terms.total.item() == pytest.approx(terms.mil.item() + 0.5 * terms.triplet.item(), abs=1e-12)


def test_stage1_without_triplet_weight(tiny_config, tiny_bags):
    cfg = tiny_config.model_copy(update={"training": tiny_config.training.model_copy(update={"beta": 0.0})})
    rng = np.random.default_rng(1)
    pos, neg = positives(tiny_bags)[:1], negatives(tiny_bags)[:1]
    encoder = init_encoder(4, cfg.encoder.hidden_dim, rng)
    head = init_head(encoder.out_dim, cfg.head.hidden_dim, rng)
    terms = stage1_loss(pos, neg, encoder, head, cfg, build_graphs(pos + neg, cfg), rng)
    assert terms.triplet.item() == 0.0
    assert terms.total.item() == terms.mil.item()


def test_stage1_needs_both_bag_kinds(tiny_config, tiny_bags):
    with pytest.raises(ConfigError):
        stage1_warmup(negatives(tiny_bags), tiny_config)
    with pytest.raises(ConfigError):
        stage1_warmup(positives(tiny_bags), tiny_config)


def test_stage1_is_deterministic(tiny_config, tiny_bags):
    def run():
        encoder, head = stage1_warmup(tiny_bags, tiny_config, np.random.default_rng(3))
        return params_hash({**encoder.named(), **head.named()})

    assert run() == run()


def test_stage1_emits_records(tiny_config, tiny_bags):
    records = []
    stage1_warmup(tiny_bags, tiny_config, np.random.default_rng(3), on_record=records.append)
    assert records and all(r.stage == 1 for r in records)
    assert [r.step for r in records] == list(range(len(records)))
    assert all(r.omega is not None and r.triplet is not None for r in records)


# -----------------------------------
# Stages 2 and 3
# -----------------------------------
def test_later_stages_leave_frozen_parts_alone(tiny_config, tiny_bags):
    rng = np.random.default_rng(4)
    encoder, head = stage1_warmup(tiny_bags, tiny_config, rng)
    encoder_hash = params_hash(encoder.named())

    flow = stage2_train_flow(tiny_bags, encoder, tiny_config, rng)
    assert params_hash(encoder.named()) == encoder_hash
    flow_hash = params_hash(flow.named())

    head_hash = params_hash(head.named())
    records = []
    stage3_finetune(tiny_bags, encoder, head, flow, tiny_config, rng, on_record=records.append)
    assert params_hash(encoder.named()) == encoder_hash
    assert params_hash(flow.named()) == flow_hash
    assert params_hash(head.named()) != head_hash
    assert all(r.omega is not None and r.pseudo == 20 for r in records)


def test_stage2_needs_negatives(tiny_config, tiny_bags, rng):
    encoder = init_encoder(4, tiny_config.encoder.hidden_dim, rng)
    with pytest.raises(ConfigError):
        stage2_train_flow(positives(tiny_bags), encoder, tiny_config, rng)


def test_flow_fit_lowers_held_out_normal_loss(tiny_config, tiny_bags):
    cfg = tiny_config.model_copy(update={"training": tiny_config.training.model_copy(update={"epochs_flow": 15})})
    rng = np.random.default_rng(6)
    encoder, _ = stage1_warmup(tiny_bags, cfg, rng)
    neg = negatives(tiny_bags)
    fit, held_out = neg[:-3], neg[-3:]
    x_held = np.vstack([encode_bag(build_bag_graph(b.instances, cfg.graph), encoder) for b in held_out])
    untrained = init_flow(encoder.out_dim, np.random.default_rng(0), cfg.flow)
    flow = stage2_train_flow(fit, encoder, cfg, rng)
    assert nf_loss(flow, x_held).item() < nf_loss(untrained, x_held).item()


def test_stage3_loss_without_anomalies(tiny_config, rng):
    head = init_head(8, 4, rng)
    terms = stage3_loss([], [rng.normal(size=(5, 8))], head, tiny_config, None)
    assert terms.positive is None
    assert terms.total.item() == terms.negative.item()


def test_stage3_warns_when_positive_term_skipped(tiny_config, tiny_bags, rng, caplog):
    cfg = tiny_config.model_copy(update={"pseudo": tiny_config.pseudo.model_copy(update={"mode": "none"})})
    encoder = init_encoder(4, cfg.encoder.hidden_dim, rng)
    head = init_head(encoder.out_dim, cfg.head.hidden_dim, rng)
    with caplog.at_level(logging.WARNING, logger="services.pipeline_service"):
        stage3_finetune(negatives(tiny_bags), encoder, head, None, cfg, rng)
    assert "positive term skipped" in caplog.text


def test_draw_pseudo_modes(tiny_config, rng):
    def with_mode(mode):
        return tiny_config.model_copy(update={"pseudo": tiny_config.pseudo.model_copy(update={"mode": mode})})

    noise = draw_pseudo(None, 8, with_mode("noise"), rng)
    assert noise.shape == (retained_count(200, 0.1), 8)
    assert draw_pseudo(None, 8, with_mode("none"), rng) is None
    with pytest.raises(ContractError):
        draw_pseudo(None, 8, with_mode("flow"), rng)


# -----------------------------------
# Full runs, checkpoints, evaluation
# -----------------------------------
def test_stages_argument(tiny_config, tiny_bags):
    with pytest.raises(ConfigError):
        run_training(tiny_bags, tiny_config, stages="13")
    result = run_training(tiny_bags, tiny_config, stages="1")
    assert result.completed_stage == 1
    assert result.detector.flow is None
    assert result.data.split.unseen_classes


@pytest.mark.slow
def test_resume_from_stage2_matches_uninterrupted_run(tiny_config, tiny_bags, tmp_path):
    full = run_training(tiny_bags, tiny_config, "123", out_dir=tmp_path / "full")
    assert [p.name for p in full.checkpoints] == ["stage1.ckpt", "stage2.ckpt", "stage3.ckpt"]
    resumed = run_training(
        tiny_bags, tiny_config, "123", out_dir=tmp_path / "resumed", resume=tmp_path / "full" / "stage2.ckpt"
    )
    assert [p.name for p in resumed.checkpoints] == ["stage3.ckpt"]
    assert resumed.detector.hashes() == full.detector.hashes()
    assert (tmp_path / "full" / "stage3.ckpt").read_bytes() == (tmp_path / "resumed" / "stage3.ckpt").read_bytes()


def test_checkpoint_refuses_other_config(tiny_config, tiny_bags, tmp_path):
    run_training(tiny_bags, tiny_config, "1", out_dir=tmp_path)
    detector, meta = load_detector(tmp_path / "stage1.ckpt", tiny_config)
    assert meta["stage"] == 1 and detector.flow is None
    with pytest.raises(ConfigError):
        load_detector(tmp_path / "stage1.ckpt", build_config(tiny_config.model_dump(), seed=8))


def test_checkpoints_carry_optimizer_moments(tiny_config, tiny_bags, tmp_path):
    result = run_training(tiny_bags, tiny_config, "12", out_dir=tmp_path)
    tensors, _ = load_checkpoint(tmp_path / "stage2.ckpt")
    first, second = optimizer_state(tensors, 1), optimizer_state(tensors, 2)
    assert first["t"][0, 0] > 0 and second["t"][0, 0] > 0
    assert optimizer_state(load_checkpoint(tmp_path / "stage1.ckpt")[0], 2) == {}

    flow_params = result.detector.flow.named()
    restored = Adam(flow_params, tiny_config.training.flow_lr_max)
    restored.load_state_arrays(second)
    assert restored.state.t == int(second["t"][0, 0])
    for name, m in zip(restored.names, restored.state.m):
        assert m.shape == flow_params[name].values.shape
        assert np.array_equal(m, second[f"m/{name}"])


@pytest.mark.slow
def test_full_run_reports_unseen_metrics(tiny_config, tiny_bags):
    result = run_training(tiny_bags, tiny_config, "123")
    test = result.data.split.test
    seen = sorted(result.data.split.seen_classes)
    report = evaluate_detector(result.detector, test, seen, tiny_config)
    assert report.summary.unseen is not None
    assert 0.0 <= report.metric("unseen") <= 1.0

    by_flow = flow_scores(test, result.detector, tiny_config)
    pooled = np.concatenate(list(by_flow.values()))
    assert np.all((pooled > 0.0) & (pooled <= 1.0))
    assert evaluate_detector(result.detector, test, seen, tiny_config, scorer="flow").summary.overall.n_pos > 0


@pytest.mark.slow
def test_trained_head_ranks_anomalies_above_normals(tiny_config, tiny_bags):
    cfg = tiny_config.model_copy(
        update={"training": tiny_config.training.model_copy(update={"epochs_warmup": 20, "epochs_edl": 10})}
    )
    result = run_training(tiny_bags, cfg, "123")
    train_pos = positives(result.data.split.train)
    anomalous = np.concatenate([
        score_video(b.instances, result.detector.encoder, result.detector.head, cfg)[b.instance_labels == 1]
        for b in train_pos
    ])
    normal = np.concatenate([
        score_video(b.instances, result.detector.encoder, result.detector.head, cfg)
        for b in negatives(result.data.split.train)
    ])
    assert np.median(anomalous) > np.median(normal)
