"""Self-trained ugly-duckling screening for wide-field skin images.

Per patient: tiled lesion detection, background-suppressing segmentation,
a small variational autoencoder trained (or finetuned) on that patient's
own lesion crops, and L2-to-centroid outlier scoring with an adaptive
threshold. No cross-patient labels are needed at analysis time.
"""

__version__ = "0.1.0"

from .config import (MODE_EMBED_ONLY, MODE_FINETUNE, MODE_SCRATCH, DetectorConfig,
                     PipelineConfig, ScoringConfig, SegmenterConfig, VaeConfig,
                     config_from_dict, config_hash, load_config)
from .detector import (DetectorModel, DetectorTrainConfig, LesionCrop,
                       baseline_blob_detect, classical_detector, crop_lesion,
                       detect_tile, detection_recall, load_detector, save_detector,
                       train_neural_detector)
from .evalmetrics import (BinaryMetrics, EvalResult, GroundTruth, average_precision,
                          binary_metrics, evaluate_corpus, match_report_to_truth,
                          read_truth_boxes_csv, read_truth_csv, reciprocal_rank,
                          topk_agreement)
from .pipeline import (AnalysisResult, AnnotatedImage, analyze_image, detect_lesions,
                       write_manifest)
from .scoring import (DistanceVector, LesionScore, PatientReport, build_report,
                      classify, compute_threshold, embedding_distances, rank_lesions,
                      read_report, write_report)
from .segmenter import (REFERENCE_UNET_PARAMS, MaskedLesion, ParameterBudgetError,
                        SegmentationMask, SegmenterModel, SegmenterTrainConfig,
                        apply_mask, build_compact_unet, load_segmenter, mean_iou,
                        save_segmenter, segment, select_threshold, train_segmenter)
from .synthgen import (OutlierShift, SynthConfig, SynthGroundTruth, corpus_plan,
                       generate_corpus, generate_patient, generate_training_crops,
                       write_corpus)
from .tiling import BoundingBox, Tile, WideFieldImage, iou, nms, tile_image, \
    to_full_coords
from .vae import (VaeLossBreakdown, VaeModel, build_vae, embed, embed_batch, finetune,
                  load_vae, pretrain_base, recon_score, recon_scores, save_vae,
                  train_scratch, vae_loss, vae_loss_gradients)
