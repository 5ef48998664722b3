import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from aenet.model import EncoderConfig, AENetConfig  # noqa: E402

# Narrow encoder used by gradient checks of the whole network
TINY_ENCODER = EncoderConfig(widths=(2, 2, 4, 4, 4), convs_per_stage=(1, 1, 1, 1, 1), batch_norm=True)

SQUARE_XML = b"""<?xml version="1.0" encoding="UTF-8"?>
<Annotations>
  <Annotation Id="1">
    <Regions>
      <Region Id="1">
        <Vertices>
          <Vertex X="2" Y="2"/>
          <Vertex X="6" Y="2"/>
          <Vertex X="6" Y="6"/>
          <Vertex X="2" Y="6"/>
        </Vertices>
      </Region>
      <Region Id="2">
        <Vertices>
          <Vertex X="1" Y="1"/>
          <Vertex X="2" Y="2"/>
        </Vertices>
      </Region>
    </Regions>
  </Annotation>
</Annotations>
"""


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return AENetConfig(encoder=TINY_ENCODER, decoder_widths=(4, 4), sam_reduction=2, fusion_width=4, seed=7)


@pytest.fixture
def square_xml():
    return SQUARE_XML
