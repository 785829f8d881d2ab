from pathlib import Path

import pytest
from PIL import Image

from zoomcot.geometry import RasterImage

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def solid_image():
    def make(width: int, height: int, color=(200, 30, 30)) -> RasterImage:
        return RasterImage(Image.new("RGB", (width, height), color))

    return make


@pytest.fixture
def png_file(tmp_path, solid_image):
    def make(name="img.png", width=64, height=48, color=(10, 200, 10)) -> Path:
        path = tmp_path / name
        solid_image(width, height, color).save(path)
        return path

    return make
