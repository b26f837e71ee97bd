SERVICE_NAME = "savc-fscil"

# (base classes, incremental classes, incremental sessions, shots, resolution)
BENCHMARK_SCHEDULES: dict[str, dict[str, int]] = {
    "cifar100": {
        "base_classes": 60,
        "incremental_classes": 40,
        "incremental_sessions": 8,
        "shots": 5,
        "resolution": 32,
    },
    "mini_imagenet": {
        "base_classes": 60,
        "incremental_classes": 40,
        "incremental_sessions": 8,
        "shots": 5,
        "resolution": 84,
    },
    "cub200": {
        "base_classes": 100,
        "incremental_classes": 100,
        "incremental_sessions": 10,
        "shots": 5,
        "resolution": 224,
    },
}

MANIFEST_FILE = "manifest.json"
SPLITS_FILE = "splits.json"
METRICS_STREAM_FILE = "metrics.jsonl"
ACCURACY_FILE = "accuracy.csv"
SESSION_TABLE_FILE = "session_table.json"
FAILURE_MARKER_FILE = "FAILED.json"
SESSIONS_DIR = "sessions"
SESSION_REPORT_FILE = "report.json"
SEPARATION_FILE = "separation.json"
PREDICTIONS_FILE = "predictions.csv"
CONFUSION_FILE = "confusion.csv"
CDF_INTER_FILE = "cdf_inter.csv"
CDF_INTRA_FILE = "cdf_intra.csv"
CHECKPOINT_FILE = "checkpoint.pt"
EMBEDDINGS_FILE = "embeddings.csv"


def session_dir_name(session_index: int) -> str:
    return f"session_{session_index:02d}"
