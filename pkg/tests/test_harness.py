"""Trace CSV round-trips, Pareto manifests, live-structure resolution and
discrete retraining."""

import json

import numpy as np
import numpy.testing as npt
import pytest

from goldnas import flops as fm
from goldnas import harness
from goldnas import scheduler as sch
from goldnas.data import generate_synthetic
from goldnas.harness import (
    TRACE_COLUMNS,
    DiscreteNetwork,
    RetrainSchedule,
    TraceRow,
    emit_trace,
    parse_trace,
    read_pareto_manifest,
    read_trace,
    resolve_live_structure,
    retrain,
    write_pareto_set,
    write_trace,
)
from goldnas.space import (
    ArchitectureEncoding,
    ArchitectureError,
    GateId,
    NetworkShapeConfig,
    OpKind,
    enumerate_gates,
    full_architecture,
)


def sample_rows():
    return [
        TraceRow(1, 2e-5, 2e-5, 0, 20, 123456.789012345, 856192, 1.234567890123,
                 0.8819999999999999, 1),
        TraceRow(2, 1e-5, 1e-5, 7, 13, 98765.4321, 630912, 0.111, 1.0, 0),
    ]


# -- trace CSV --------------------------------------------------------------


def test_trace_header_is_fixed():
    text = emit_trace([])
    assert text == (
        "epoch,lambda,delta_lambda,n_pruned,active_gates,expected_flops,"
        "discrete_flops,train_loss,train_acc,patience_t\n"
    )


def test_trace_round_trip_is_exact():
    rows = sample_rows()
    assert parse_trace(emit_trace(rows)) == rows


def test_trace_file_round_trip(tmp_path):
    rows = sample_rows()
    path = tmp_path / "trace.csv"
    write_trace(rows, path)
    assert read_trace(path) == rows
    # byte-identical on re-emission
    assert emit_trace(read_trace(path)) == path.read_text()


def test_parse_trace_rejects_bad_header():
    with pytest.raises(ValueError, match="header"):
        parse_trace("epoch,lambda\n1,2\n")


def test_parse_trace_rejects_short_row():
    text = emit_trace(sample_rows()) + "3,1,2\n"
    with pytest.raises(ValueError, match="row"):
        parse_trace(text)


# -- pareto manifest --------------------------------------------------------


def test_pareto_manifest_round_trip(tmp_path):
    shape = NetworkShapeConfig(1, 3, 8, 16, 16)
    arch = full_architecture(shape)
    pareto = [
        sch.ParetoRecord(arch=arch, flops=5000, train_loss=0.3, train_acc=0.97, epoch=4),
        sch.ParetoRecord(
            arch=ArchitectureEncoding(shape=shape, active=frozenset(list(arch.active)[:2])),
            flops=4000, train_loss=0.4, train_acc=0.95, epoch=9,
        ),
    ]
    manifest = write_pareto_set(pareto, tmp_path / "pareto")
    records = read_pareto_manifest(manifest)
    assert [r["flops"] for r in records] == [5000, 4000]
    assert [r["epoch"] for r in records] == [4, 9]
    from goldnas.space import deserialize

    for rec, src in zip(records, pareto):
        stored = deserialize((tmp_path / "pareto" / rec["file"]).read_text())
        assert stored.active == src.arch.active


def test_read_pareto_manifest_rejects_other_json(tmp_path):
    path = tmp_path / "x.json"
    path.write_text(json.dumps({"foo": 1}))
    with pytest.raises(ValueError):
        read_pareto_manifest(path)


# -- live structure ---------------------------------------------------------


def test_resolve_live_structure_full():
    shape = NetworkShapeConfig(1, 4, 8, 16, 16)
    live, kept = resolve_live_structure(full_architecture(shape))
    assert live == [[2, 3]]
    assert len(kept[0]) == len(enumerate_gates(shape))


def test_resolve_live_structure_drops_dead_chain():
    """Node 2 dead -> its outgoing gate to node 3 must be dropped too."""
    shape = NetworkShapeConfig(1, 4, 8, 16, 16)
    active = frozenset(
        [
            GateId.make(0, 2, 3, OpKind.SEP_CONV_3X3),  # source is dead
            GateId.make(0, 1, 3, OpKind.SKIP_CONNECT),
        ]
    )
    live, kept = resolve_live_structure(ArchitectureEncoding(shape=shape, active=active))
    assert live == [[3]]
    assert kept[0] == [GateId.make(0, 1, 3, OpKind.SKIP_CONNECT)]


def test_resolve_live_structure_rejects_empty_cell():
    shape = NetworkShapeConfig(1, 4, 8, 16, 16)
    active = frozenset([GateId.make(0, 2, 3, OpKind.SKIP_CONNECT)])
    with pytest.raises(ArchitectureError, match="live inner nodes"):
        resolve_live_structure(ArchitectureEncoding(shape=shape, active=active))


# -- discrete network -------------------------------------------------------


def test_discrete_network_has_no_gate_machinery():
    shape = NetworkShapeConfig(2, 4, 8, 16, 16, (1,))
    net = DiscreteNetwork(full_architecture(shape), num_classes=4, seed=0)
    assert not hasattr(net, "alpha")
    assert all("alpha" not in name for name, _ in net.params)


def test_discrete_network_forward_shape_and_determinism():
    shape = NetworkShapeConfig(2, 4, 8, 16, 16, (1,))
    net = DiscreteNetwork(full_architecture(shape), num_classes=4, seed=0)
    x = np.random.default_rng(0).normal(size=(3, 3, 16, 16))
    a = net.forward(x, training=False).data
    b = net.forward(x, training=False).data
    assert a.shape == (3, 4)
    npt.assert_array_equal(a, b)


def test_discrete_network_dead_nodes_shrink_concat():
    shape = NetworkShapeConfig(1, 4, 8, 16, 16)
    active = frozenset(
        [GateId.make(0, 0, 3, OpKind.SKIP_CONNECT), GateId.make(0, 1, 3, OpKind.SKIP_CONNECT)]
    )
    net = DiscreteNetwork(
        ArchitectureEncoding(shape=shape, active=active), num_classes=2, seed=0
    )
    # only node 3 is live, so the classifier sees 8 channels, not 16
    assert net.fc_w.data.shape == (8, 2)


def test_retrain_zero_epochs_returns_initial_metrics():
    shape = NetworkShapeConfig(1, 3, 4, 8, 8)
    data = generate_synthetic(2, 10, 8, seed=0)
    model, metrics = retrain(full_architecture(shape), data, RetrainSchedule(epochs=0))
    assert metrics["train_loss"] == [] and metrics["train_acc"] == []
    assert 0.0 <= metrics["eval_acc"] <= 1.0


def test_retrain_fits_small_synthetic_task():
    shape = NetworkShapeConfig(1, 3, 8, 16, 16)
    data = generate_synthetic(2, 60, 16, seed=3)
    model, metrics = retrain(
        full_architecture(shape), data, RetrainSchedule(epochs=5, batch_size=24, seed=0)
    )
    assert metrics["train_acc"][-1] >= 0.9
    flops = fm.discrete_flops(model.encoding, data.num_classes)
    assert flops == fm.discrete_flops(full_architecture(shape), 2)


def test_retrain_deterministic():
    shape = NetworkShapeConfig(1, 3, 4, 8, 8)
    data = generate_synthetic(2, 16, 8, seed=1)
    _, m1 = retrain(full_architecture(shape), data, RetrainSchedule(epochs=2, batch_size=8))
    _, m2 = retrain(full_architecture(shape), data, RetrainSchedule(epochs=2, batch_size=8))
    assert m1 == m2
