"""parvo: gradient-inversion attacks on PEFT updates of CLIP-like classifiers."""

from .attack import (
    AttackConfig,
    ReconstructionResult,
    adapter_grad_expression,
    dummy_text_grad,
    estimate_text_feature_grad,
    estimate_tf_update,
    matching_loss,
    predict_label,
    reconstruct,
    reconstruct_raw_dlg,
    reconstruct_without_label_prediction,
)
from .autodiff import Graph, activation_derivatives, apply_primitive, grad_check
from .client import LeakedUpdate, client_step, load_leak, save_leak
from .metrics import QualityScore, eval_convergence, psnr, quality_score, ssim
from .model import (
    Adapter,
    EncoderStructure,
    MultimodalModel,
    SoftPrompt,
    build_model,
    encode_image,
    encode_text,
    load_model,
    logits,
    loss,
    peft_grads,
    save_model,
)

__all__ = [
    "AttackConfig",
    "ReconstructionResult",
    "adapter_grad_expression",
    "dummy_text_grad",
    "estimate_text_feature_grad",
    "estimate_tf_update",
    "matching_loss",
    "predict_label",
    "reconstruct",
    "reconstruct_raw_dlg",
    "reconstruct_without_label_prediction",
    "Graph",
    "activation_derivatives",
    "apply_primitive",
    "grad_check",
    "LeakedUpdate",
    "client_step",
    "load_leak",
    "save_leak",
    "QualityScore",
    "eval_convergence",
    "psnr",
    "quality_score",
    "ssim",
    "Adapter",
    "EncoderStructure",
    "MultimodalModel",
    "SoftPrompt",
    "build_model",
    "encode_image",
    "encode_text",
    "load_model",
    "logits",
    "loss",
    "peft_grads",
    "save_model",
]

__version__ = "0.1.0"
