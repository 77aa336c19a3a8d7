"""Binary-tensor sketches of real filter banks with associative convolution."""
from .assoc import (
    DependencyTree,
    FeatureMap,
    OpCounter,
    TernaryTensor,
    assoc_conv_step,
    associative_convolve_all,
    build_mst,
    build_random_tree,
    direct_convolve_all,
    distance,
    sketch_layer_convolve,
    tern_combine,
    ternary_conv,
)
from .model_io import (
    LayerSpec,
    generate_synthetic,
    load_array_file,
    load_sketch,
    save_sketch,
    save_weights,
)
from .sketch import (
    AccountingReport,
    BoundReport,
    RefinementState,
    bound_report,
    compute_lambda,
    direct_bound,
    direct_sketch,
    energy_curve,
    refine_scales,
    refined_bound,
    refined_sketch,
    storage_and_flops,
)
from .tensor import (
    BinaryTensor,
    RealTensor,
    Shape,
    Sketch,
    binary_inner_product,
    frobenius_norm_sq,
    inner_product,
    reconstruct,
    sign_tensor,
)

__version__ = "0.1.0"
