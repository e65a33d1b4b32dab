"""Synthetic liver-lesion implantation pipeline on phantom CT slices.

Submodules:

* ``autodiff`` / ``layers`` - float64 reverse-mode tensor core and layers;
* ``volumes`` / ``corpus``  - CT-like volume container and corpus layout;
* ``phantom``               - procedural ground-truth slice generator;
* ``edges`` / ``pairs``     - Canny chain and conditional lesion pairs;
* ``synthesis``             - adversarial + procedural lesion synthesizers;
* ``implant``               - stochastic lesion implantation;
* ``segmentation``          - U-Net lesion segmenter;
* ``experiment``            - five-arm comparison harness;
* ``cli``                   - command-line entry point.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, backward  # noqa: F401
from .corpus import Corpus  # noqa: F401
from .experiment import (  # noqa: F401
    ExperimentConfig,
    dice_score,
    relative_gain,
    render_table,
    run_experiment,
)
from .implant import AugmentPolicy, AugmentRanges, ImplantSpec, implant  # noqa: F401
from .pairs import ConditionalMap, LesionPair, build_pairs  # noqa: F401
from .phantom import PhantomSpec, gen_corpus, gen_slice  # noqa: F401
from .segmentation import SegNet, SegTrainConfig, train_seg  # noqa: F401
from .synthesis import (  # noqa: F401
    GeneratorNet,
    SynthTrainConfig,
    procedural_synthesize,
    synthesize,
    train,
)
