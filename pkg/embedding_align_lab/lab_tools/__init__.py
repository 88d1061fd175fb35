from .tensor import (
    Tensor,
    backward,
    precision,
    finite_diff_gradient,
    relative_error
)
from .encoders import (
    ModelParams,
    init_params,
    encode_image,
    encode_text,
    encode_images,
    encode_texts,
    zero_shot_classify,
    predict_label
)
from .corpus import (
    CorpusItem,
    Vocabulary,
    tokenize,
    class_captions,
    generate_corpus
)
from .training import (
    contrastive_train,
    evaluate_zero_shot
)
from .attack import (
    AttackConfig,
    AttackPair,
    AttackResult,
    AttackState,
    AttackTrace,
    align_loss,
    align_step,
    run_alignment,
    run_attack_batch,
    clamp_to_domain
)
from .metrics import (
    distortion,
    psnr,
    ssim,
    success_rate,
    cosine_report,
    fit_pca,
    project,
    amplify_diff,
    classification_matrix
)
from .detect import (
    DetectionVerdict,
    noise_probe,
    detection_sweep
)
from .artifacts import (
    save_tensor,
    load_tensor,
    export_image8,
    import_image8,
    save_checkpoint,
    load_checkpoint,
    quantization_survival
)

__all__ = [
    "Tensor",
    "backward",
    "precision",
    "finite_diff_gradient",
    "relative_error",
    "ModelParams",
    "init_params",
    "encode_image",
    "encode_text",
    "encode_images",
    "encode_texts",
    "zero_shot_classify",
    "predict_label",
    "CorpusItem",
    "Vocabulary",
    "tokenize",
    "class_captions",
    "generate_corpus",
    "contrastive_train",
    "evaluate_zero_shot",
    "AttackConfig",
    "AttackPair",
    "AttackResult",
    "AttackState",
    "AttackTrace",
    "align_loss",
    "align_step",
    "run_alignment",
    "run_attack_batch",
    "clamp_to_domain",
    "distortion",
    "psnr",
    "ssim",
    "success_rate",
    "cosine_report",
    "fit_pca",
    "project",
    "amplify_diff",
    "classification_matrix",
    "DetectionVerdict",
    "noise_probe",
    "detection_sweep",
    "save_tensor",
    "load_tensor",
    "export_image8",
    "import_image8",
    "save_checkpoint",
    "load_checkpoint",
    "quantization_survival"
]
