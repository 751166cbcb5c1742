import pytest

from cloaknet import models
from cloaknet.convert import convert
from cloaknet.errors import InvalidParams
from cloaknet.transform import ObfuscationParams
from cloaknet.verify import sabotage, verify_model


@pytest.fixture(scope="module")
def fig2_parts():
    g = models.fig2()
    part_a, part_b, _ = convert(g, ObfuscationParams(seed=0))
    return g, part_a, part_b


def test_clean_model_passes(fig2_parts):
    report = verify_model(*fig2_parts, trials=10)
    assert report.passed and report.layer is None
    assert len(report.errors) == 10 and report.max_error <= 1e-4
    assert "PASS" in report.to_text()


@pytest.mark.parametrize("what", ["lambda", "perm"])
@pytest.mark.parametrize("layer", ["conv1", "conv5", "conv7"])
def test_sabotaged_secret_is_localized(fig2_parts, what, layer):
    g, part_a, part_b = fig2_parts
    report = verify_model(g, part_a, sabotage(part_b, layer, what), trials=2)
    assert not report.passed
    assert report.layer == layer
    assert layer in report.to_text()


def test_sabotage_leaves_original_untouched(fig2_parts):
    g, part_a, part_b = fig2_parts
    sabotage(part_b, "conv3", "lambda")
    assert verify_model(g, part_a, part_b, trials=2).passed


def test_stale_unmask_needs_second_round(fig2_parts):
    g, part_a, part_b = fig2_parts
    assert verify_model(g, part_a, part_b, trials=1, faults={"stale_unmask": "conv3"}).passed
    report = verify_model(g, part_a, part_b, trials=3, faults={"stale_unmask": "conv3"})
    assert not report.passed and report.layer == "conv3" and report.trial == 1


def test_depthwise_sabotage():
    g = next(g for g in map(models.random_model, range(100)) if "DWConv" in g.kinds())
    part_a, part_b, _ = convert(g, ObfuscationParams(seed=1))
    dw = next(n.name for n in g.nodes if n.kind == "DWConv")
    report = verify_model(g, part_a, sabotage(part_b, dw, "perm"), trials=2)
    assert not report.passed and report.layer == dw


def test_bad_arguments(fig2_parts):
    g, part_a, part_b = fig2_parts
    with pytest.raises(InvalidParams):
        sabotage(part_b, "conv3", "sign")
    with pytest.raises(InvalidParams):
        sabotage(part_b, "relu2", "lambda")
    with pytest.raises(InvalidParams):
        verify_model(g, part_a, part_b, trials=0)
