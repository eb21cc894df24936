import xml.etree.ElementTree as ET

import numpy as np
import pytest

from spatial_templates.corpus import Box
from spatial_templates.models import Query, RegPrediction
from spatial_templates.render import RenderError, Scene, render_scene


def reg_scene(center=(0.6, 0.4), half=(0.1, 0.1)):
    return Scene(
        query=Query("man", "riding", "horse", Box(0.4, 0.5, 0.08, 0.28)),
        reg=RegPrediction(center=np.asarray(center), half=np.asarray(half)))


def pix_scene(grid=None):
    if grid is None:
        grid = np.full((15, 15), 0.5)
    return Scene(
        query=Query("man", "riding", "horse", Box(0.4, 0.5, 0.08, 0.28)),
        heatmap=grid)


class TestSceneInvariant:
    def test_both_kinds_rejected(self):
        with pytest.raises(RenderError):
            Scene(query=Query("a", "b", "c", Box(0.5, 0.5, 0.1, 0.1)),
                  reg=RegPrediction(np.zeros(2), np.zeros(2)),
                  heatmap=np.zeros((3, 3)))

    def test_neither_kind_rejected(self):
        with pytest.raises(RenderError):
            Scene(query=Query("a", "b", "c", Box(0.5, 0.5, 0.1, 0.1)))


class TestRenderScene:
    def test_well_formed_xml(self):
        for scene in (reg_scene(), pix_scene()):
            doc = render_scene(scene)
            root = ET.fromstring(doc)
            assert root.tag.endswith("svg")

    def test_deterministic_bytes(self):
        a = render_scene(reg_scene())
        b = render_scene(reg_scene())
        assert a == b
        c = render_scene(pix_scene(), show_reflection=True)
        d = render_scene(pix_scene(), show_reflection=True)
        assert c == d

    def test_caption_present(self):
        assert "(man, riding, horse)" in render_scene(reg_scene())

    def test_out_of_canvas_prediction_clipped(self):
        doc = render_scene(reg_scene(center=(1.3, 0.5), half=(0.2, 0.2)))
        root = ET.fromstring(doc)
        for rect in root.iter("{http://www.w3.org/2000/svg}rect"):
            x = float(rect.get("x"))
            w = float(rect.get("width"))
            assert x >= 0.0 and x + w <= 512.0 + 1e-6

    def test_uniform_heatmap_half_opacity(self):
        doc = render_scene(pix_scene())
        assert doc.count('fill-opacity="0.500000"') == 225

    def test_reflection_doubles_panels(self):
        single = render_scene(pix_scene())
        double = render_scene(pix_scene(), show_reflection=True)
        assert double.count("<g ") == 2 * single.count("<g ")

    def test_size_bounded_for_m50(self):
        grid = np.random.default_rng(0).uniform(size=(50, 50))
        doc = render_scene(pix_scene(grid=grid))
        assert len(doc.encode()) < 1_000_000

    def test_caption_escaped(self):
        scene = Scene(query=Query("a<b", "&", "c", Box(0.5, 0.5, 0.1, 0.1)),
                      reg=RegPrediction(np.zeros(2), np.zeros(2)))
        doc = render_scene(scene)
        ET.fromstring(doc)
        assert "a&lt;b" in doc
