__version__ = "0.1.0"

from .ring import RingParams, RnsPolynomial, preset, params_from_config
from .encoding import COEFF, SLOT, nested
from .ckks import CkksContext, Ciphertext, Decryptor, Encoder, Evaluator, KeyGenerator, OpCounter, Plaintext
from .conv import FeatureMapLayout, KernelTensor
from .bootstrap import BootstrapPlan, OracleModEval, PolyModEval, bootstrap, make_split
from .cnn import InferenceSession, Network, parse_network, reference_inference, run_inference

__all__ = [
    "RingParams", "RnsPolynomial", "preset", "params_from_config",
    "COEFF", "SLOT", "nested",
    "CkksContext", "Ciphertext", "Decryptor", "Encoder", "Evaluator", "KeyGenerator", "OpCounter", "Plaintext",
    "FeatureMapLayout", "KernelTensor",
    "BootstrapPlan", "OracleModEval", "PolyModEval", "bootstrap", "make_split",
    "InferenceSession", "Network", "parse_network", "reference_inference", "run_inference",
]
