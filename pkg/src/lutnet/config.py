"""
config.py — Shared configuration constants for lutnet.

CLI flags and an optional --config JSON file override these at runtime
(see cli.apply_config_file); a run with no overrides uses exactly these.
"""

# ── Fixed-point LUT inference ─────────────────────────────────────────────
SHIFT_BITS       = 16      # s: LUT entries hold round(2^s / dx * w * a)
LUT_ENTRY_BITS   = 32      # signed container width for LUT entries on disk
TANH_DX          = 0.02    # activation-input step for tanh layers
MAX_ACTIVATION_SPAN = 1 << 20   # search limit when sizing an activation table
TOPK             = 5

# ── Normalization folding ────────────────────────────────────────────────
BN_EPSILON = 1e-3          # used when a checkpoint omits epsilon

# ── Codebooks ────────────────────────────────────────────────────────────
KMEANS_SUBSAMPLE = 100_000
KMEANS_MAX_ITER  = 100
KMEANS_TOL       = 1e-7
KMEANS_RESTARTS  = 10      # k-means++ restarts; best inertia wins
KMEANS_DP_MAX    = 2048    # largest sample the O(n²k) optimal 1-D k-means accepts
MODELFREE_CENTER = 'mean'  # 'mean' (L2) or 'median' (L1)

# ── Octave / octave engine ───────────────────────────────────────────────
LOG_HEADROOM_BITS = 16     # accumulator bits kept free above the largest term

# ── Toy training ─────────────────────────────────────────────────────────
REQUANT_PERIOD = 100       # S: steps between requantization events
LEARNING_RATE  = 0.05
MOMENTUM       = 0.9
WEIGHT_DECAY   = 0.0
BATCH_SIZE     = 32
EPOCHS         = 40      # continuous phase
FINETUNE_EPOCHS = 20     # quantized phase (STE + requantization)
HIDDEN_UNITS   = (16, 16)
CONV_CHANNELS  = 4
TOY_SAMPLES    = 1000
TOY_NOISE      = 0.15
VAL_FRACTION   = 0.25
PREFETCH_BATCHES = 8

# ── Output ───────────────────────────────────────────────────────────────
OUTPUT_DIR         = 'runs'
OUTPUT_DIR_ENV_VAR = 'LUTNET_OUTPUT_DIR'   # the only environment variable read
