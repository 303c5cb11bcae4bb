"""End-to-end training: instruction backbone + query bridge + adapter + denoiser.

The pipeline couples a language loss on the instruction response with a noise
prediction loss on the edit target; the two are summed with unit weights.
Training data comes from the deterministic synthetic stream, addressed by a
global sample counter so a resumed run replays the exact same batches.
"""

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .backbone import BackboneConfig, ToyVLLM, deterministic_init
from .bridge import BridgeConfig, QueryBridge
from .data import MixConfig, SceneSample, Tokenizer, TokenSequence, get_tokenizer, nth_sample
from .diffusion import (LATENT_FACTOR, NoiseSchedule, UNet, UNetConfig,
                        diffusion_loss_terms, diffusion_training_loss,
                        encode_latent, sample)
from .encoder import EncoderConfig, TwoTowerEncoder
from .errors import NonFiniteLoss
from .masks import BinaryMask
from .mea import ConditionBundle, MaskEnhancedAdapter, MEAConfig

CHECKPOINT_VERSION = 1

# Confidence-gated compositing used by edit(): changes below this per-pixel
# magnitude (max over channels) are treated as sampler noise and dropped.
CHANGE_CONFIDENCE = 0.15
CLEANUP_RADIUS = 2


def to_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img)).float()


def apply_confident_changes(generated: np.ndarray, scene: np.ndarray,
                            m: BinaryMask,
                            threshold: float = CHANGE_CONFIDENCE,
                            radius: int = CLEANUP_RADIUS) -> np.ndarray:
    """Composite only confident generated changes inside the user's mask.

    Pixels outside `m` always keep the scene value; inside it, a change is
    applied only where its magnitude clears `threshold`, after a
    morphological opening/closing (disc of `radius`) that removes isolated
    specks and fills pinholes in the accepted region.
    """
    from scipy import ndimage

    scene = np.asarray(scene, dtype=generated.dtype)
    delta = np.abs(generated - scene).max(axis=2)
    keep = (delta > threshold) & m.data.astype(bool)
    if radius > 0:
        yy, xx = np.ogrid[-radius:radius + 1, -radius:radius + 1]
        disc = (yy * yy + xx * xx) <= radius * radius
        keep = ndimage.binary_opening(keep, structure=disc)
        keep = ndimage.binary_closing(keep, structure=disc)
        keep &= m.data.astype(bool)
    w = keep[..., None].astype(generated.dtype)
    return w * generated + (1.0 - w) * scene


@dataclass
class PipelineConfig:
    n_image_tokens: int = 8
    d_model: int = 128
    d_e: int = 128
    n_layers: int = 4
    lora_rank: int = 4
    lambda_multi: float = 1.0
    eq6_residual: bool = True
    share_branch_kv: bool = False
    ablation: str = "full"
    timesteps: int = 200
    unet_base: int = 64
    unet_mults: tuple = (1, 2)
    seed: int = 0

    def backbone(self, vocab_size: int) -> BackboneConfig:
        return BackboneConfig(vocab_size=vocab_size, d_model=self.d_model,
                              n_layers=self.n_layers,
                              n_image_tokens=self.n_image_tokens,
                              lora_rank=self.lora_rank)

    def bridge(self) -> BridgeConfig:
        return BridgeConfig(d_e=self.d_e, n_inputs=self.n_image_tokens)

    def mea(self) -> MEAConfig:
        return MEAConfig(d_e=self.d_e, lambda_multi=self.lambda_multi,
                         eq6_residual=self.eq6_residual,
                         share_branch_kv=self.share_branch_kv,
                         ablation=self.ablation)

    def unet(self) -> UNetConfig:
        return UNetConfig(base_channels=self.unet_base,
                          channel_mults=self.unet_mults, d_e=self.d_e)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["unet_mults"] = list(self.unet_mults)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        d["unet_mults"] = tuple(d["unet_mults"])
        return cls(**d)


class EditingPipeline(nn.Module):
    """Instruction-following editor: backbone -> bridge -> adapter -> denoiser.

    The two-tower embedder is frozen throughout; it only supplies image
    feature rows for the adapter's conditioning pathway.
    """

    def __init__(self, cfg: PipelineConfig, tokenizer: Optional[Tokenizer] = None):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = tokenizer or get_tokenizer(cfg.n_image_tokens)
        self.vllm = ToyVLLM(cfg.backbone(self.tokenizer.vocab_size), self.tokenizer)
        self.bridge = QueryBridge(cfg.bridge())
        unet_cfg = cfg.unet()
        sites = unet_cfg.attention_site_channels()
        # the adapter lives inside the UNet module tree (single registration)
        self.unet = UNet(unet_cfg, MaskEnhancedAdapter(cfg.mea(), len(sites), sites))
        self.embedder = TwoTowerEncoder(EncoderConfig(d_e=cfg.d_e), self.tokenizer)
        self.schedule = NoiseSchedule(T=cfg.timesteps)
        deterministic_init(self, cfg.seed)
        self.adapter.init_branch2()
        # zero output head: the denoiser starts by predicting zero noise,
        # which keeps the initial loss at the variance floor
        nn.init.zeros_(self.unet.head.weight)
        nn.init.zeros_(self.unet.head.bias)
        self.embedder.freeze()

    @property
    def adapter(self) -> MaskEnhancedAdapter:
        return self.unet.adapter

    def pretrain_embedder(self, steps: int, seed: int = 0) -> None:
        """Contrastive warm-up of the (otherwise random) frozen embedder.

        The adapter reads the subject through the embedder's pooled image
        embedding; with random weights that pooling is dominated by the
        neutral background and barely distinguishes subjects, so the
        embedder must be grounded before the main loop. It is refrozen
        afterwards — downstream training never touches it."""
        from .evaluation import train_two_tower
        for p in self.embedder.parameters():
            p.requires_grad_(True)
        self.embedder.train()
        train_two_tower(seed=seed, steps=steps, enc=self.embedder)
        self.embedder.freeze()

    def trainable_parameters(self):
        """(backbone group, everything-else group); embedder excluded."""
        backbone = [p for p in self.vllm.parameters() if p.requires_grad]
        rest = [p for m in (self.bridge, self.unet)
                for p in m.parameters() if p.requires_grad]
        return backbone, rest

    def condition_from_hidden(self, hidden: torch.Tensor, x1: torch.Tensor,
                              x2: Optional[torch.Tensor]) -> ConditionBundle:
        e = self.bridge(hidden)
        return self.adapter.condition(x1.unsqueeze(0),
                                      None if x2 is None else x2.unsqueeze(0),
                                      e, self.embedder)

    def sample_losses(self, s: SceneSample, generator: torch.Generator):
        x1, y = to_tensor(s.x1), to_tensor(s.y)
        x2 = None if s.x2 is None else to_tensor(s.x2)
        m = torch.from_numpy(s.m.data).float()
        tau_ids = torch.tensor(self.tokenizer.tokenize(s.instruction).ids)
        resp_ids = torch.tensor(s.response.ids)
        seq, start = self.vllm.sequence_for_training(x1, x2, m, tau_ids, resp_ids)
        logits, hidden = self.vllm(seq)
        l_vllm = self.vllm.vllm_loss(logits, resp_ids, start)
        H = self.vllm.hidden_states_at(hidden, start, len(resp_ids))
        bundle = self.condition_from_hidden(H, x1, x2)
        z_y = encode_latent(y).unsqueeze(0)
        z_x1 = encode_latent(x1).unsqueeze(0)
        # User-mask focus map at latent resolution (any covered cell counts).
        focus = torch.nn.functional.max_pool2d(
            m[None, None], kernel_size=LATENT_FACTOR)
        l_diff = diffusion_training_loss(self.unet, self.schedule, z_y, z_x1,
                                         bundle, generator, focus=focus)
        return l_vllm, l_diff

    @torch.no_grad()
    def edit(self, x1: np.ndarray, m: BinaryMask, instruction: str,
             x2: Optional[np.ndarray] = None, steps: int = 20, seed: int = 0,
             restrict_to_mask: bool = True):
        """Run the full editing pathway on one request.

        Returns (edited image HxWx3 float in [0,1], generated response text).

        When restrict_to_mask is set (the default for user-facing edits),
        only confident changes inside the user's mask are applied back onto
        the scene: the per-pixel change magnitude is thresholded, the result
        is cleaned up morphologically, and everything else is returned
        untouched. This is the behaviour a mask editor promises (pixels the
        user did not select never move) and it also strips low-amplitude
        conditioning noise off the generated image.
        """
        x1_t = to_tensor(x1)
        x2_t = None if x2 is None else to_tensor(x2)
        m_t = torch.from_numpy(m.data).float()
        tau_ids = torch.tensor(self.tokenizer.tokenize(instruction).ids)
        text_ids, H = self.vllm.generate_response(x1_t, x2_t, m_t, tau_ids)
        bundle = self.condition_from_hidden(H, x1_t, x2_t)
        z_x1 = encode_latent(x1_t).unsqueeze(0)
        out = sample(self.unet, self.schedule, z_x1, bundle, steps=steps, seed=seed)
        img = out[0].numpy()
        text = self.tokenizer.detokenize(TokenSequence(tuple(text_ids)))
        if restrict_to_mask:
            img = apply_confident_changes(img, np.asarray(x1), m)
        return img, text

    @torch.no_grad()
    def predict_mask(self, x1: np.ndarray, m: BinaryMask,
                     steps: int = 10, seed: int = 0) -> BinaryMask:
        """Restore the full object mask behind a degraded one: run the
        mask-restoration instruction and threshold the generated image."""
        from .data import MASK_PREDICT_INSTRUCTION

        out, _ = self.edit(x1, m, MASK_PREDICT_INSTRUCTION, steps=steps,
                           seed=seed, restrict_to_mask=False)
        return BinaryMask.from_array((out.mean(axis=2) > 0.5).astype(np.uint8))


@dataclass
class TrainConfig:
    seed: int = 0
    total_steps: int = 200
    batch_size: int = 4
    lr_backbone: float = 1e-4
    lr_rest: float = 2e-4
    grad_clip: float = 1.0
    encoder_steps: int = 250
    mix: MixConfig = field(default_factory=MixConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    checkpoint_every: int = 0
    log_every: int = 10
    out_dir: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "total_steps": self.total_steps,
            "batch_size": self.batch_size, "lr_backbone": self.lr_backbone,
            "lr_rest": self.lr_rest, "grad_clip": self.grad_clip,
            "encoder_steps": self.encoder_steps,
            "mix": dict(self.mix.__dict__), "pipeline": self.pipeline.to_dict(),
            "checkpoint_every": self.checkpoint_every,
            "log_every": self.log_every, "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["mix"] = MixConfig(**d["mix"])
        d["pipeline"] = PipelineConfig.from_dict(d["pipeline"])
        return cls(**d)


def make_optimizer(pipeline: EditingPipeline, cfg: TrainConfig) -> torch.optim.Adam:
    backbone, rest = pipeline.trainable_parameters()
    return torch.optim.Adam([
        {"params": backbone, "lr": cfg.lr_backbone},
        {"params": rest, "lr": cfg.lr_rest},
    ])


def step_generator(seed: int, step: int) -> torch.Generator:
    """Per-step noise generator; counter-based, so resume needs only `step`."""
    mix = np.random.SeedSequence([seed, 11, step]).generate_state(1)[0]
    return torch.Generator().manual_seed(int(mix))


def train_step(pipeline: EditingPipeline, optimizer: torch.optim.Optimizer,
               cfg: TrainConfig, step: int) -> dict:
    """One optimizer step over a freshly drawn batch; returns loss scalars."""
    gen = step_generator(cfg.seed, step)
    l_vllm_sum = torch.zeros(())
    l_diff_sum = torch.zeros(())
    for j in range(cfg.batch_size):
        s = nth_sample(cfg.mix, step * cfg.batch_size + j, pipeline.tokenizer)
        l_vllm, l_diff = pipeline.sample_losses(s, gen)
        l_vllm_sum = l_vllm_sum + l_vllm
        l_diff_sum = l_diff_sum + l_diff
    l_vllm_mean = l_vllm_sum / cfg.batch_size
    l_diff_mean = l_diff_sum / cfg.batch_size
    total = l_vllm_mean + l_diff_mean
    if not torch.isfinite(total):
        raise NonFiniteLoss(f"non-finite loss at step {step}")
    optimizer.zero_grad()
    total.backward()
    params = [p for g in optimizer.param_groups for p in g["params"]]
    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    optimizer.step()
    return {"step": step, "loss": total.item(),
            "loss_vllm": l_vllm_mean.item(), "loss_diffusion": l_diff_mean.item()}


# ---------------------------------------------------------------------------
# Checkpointing (portable zip: JSON header + little-endian float32 arrays)
# ---------------------------------------------------------------------------


def _flatten_optimizer_state(optimizer: torch.optim.Adam, named: list) -> dict:
    arrays = {}
    id_to_name = {id(p): n for n, p in named}
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if not st:
                continue
            name = id_to_name[id(p)]
            arrays[f"opt/{name}/exp_avg"] = st["exp_avg"]
            arrays[f"opt/{name}/exp_avg_sq"] = st["exp_avg_sq"]
            arrays[f"opt/{name}/step"] = torch.as_tensor(
                float(st["step"])).reshape(1)
    return arrays


def save_checkpoint(path, pipeline: EditingPipeline,
                    optimizer: Optional[torch.optim.Adam],
                    train_cfg: TrainConfig, step: int) -> None:
    named = list(pipeline.named_parameters()) + list(pipeline.named_buffers())
    arrays = {f"param/{n}": t for n, t in named}
    if optimizer is not None:
        arrays.update(_flatten_optimizer_state(optimizer,
                                               list(pipeline.named_parameters())))
    header = {
        "version": CHECKPOINT_VERSION,
        "step": step,
        "train": train_cfg.to_dict(),
        "arrays": {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        for name, t in arrays.items():
            a = t.detach().cpu().numpy().astype("<f4")
            header["arrays"][name] = list(a.shape)
            zf.writestr(f"arrays/{name}", a.tobytes())
        zf.writestr("header.json", json.dumps(header, indent=1))


def load_checkpoint(path):
    """Returns (pipeline, optimizer, train config, step)."""
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        raw = {name: np.frombuffer(zf.read(f"arrays/{name}"), dtype="<f4")
               .reshape(shape).copy()
               for name, shape in header["arrays"].items()}
    train_cfg = TrainConfig.from_dict(header["train"])
    pipeline = EditingPipeline(train_cfg.pipeline)
    state = {n[len("param/"):]: torch.from_numpy(a)
             for n, a in raw.items() if n.startswith("param/")}
    pipeline.load_state_dict(state)
    pipeline.embedder.freeze()
    optimizer = make_optimizer(pipeline, train_cfg)
    name_to_param = dict(pipeline.named_parameters())
    for n, a in raw.items():
        if not n.startswith("opt/"):
            continue
        pname, key = n[len("opt/"):].rsplit("/", 1)
        p = name_to_param[pname]
        st = optimizer.state.setdefault(p, {})
        if key == "step":
            st["step"] = torch.tensor(float(a[0]))
        else:
            st[key] = torch.from_numpy(a)
    return pipeline, optimizer, train_cfg, int(header["step"])


def train(cfg: TrainConfig, pipeline: Optional[EditingPipeline] = None,
          optimizer: Optional[torch.optim.Adam] = None,
          start_step: int = 0, log_file=None) -> EditingPipeline:
    """Run the loop from start_step to cfg.total_steps; checkpoints along the way."""
    if pipeline is None:
        pipeline = EditingPipeline(cfg.pipeline)
        if cfg.encoder_steps > 0 and start_step == 0:
            pipeline.pretrain_embedder(cfg.encoder_steps, seed=cfg.seed)
    if optimizer is None:
        optimizer = make_optimizer(pipeline, cfg)
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    log_fh = None
    if log_file is None and out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = log_file = open(out_dir / "metrics.jsonl", "a")
    try:
        for step in range(start_step, cfg.total_steps):
            metrics = train_step(pipeline, optimizer, cfg, step)
            if log_file is not None and (step % cfg.log_every == 0
                                         or step == cfg.total_steps - 1):
                log_file.write(json.dumps(metrics) + "\n")
                log_file.flush()
            if (cfg.checkpoint_every and out_dir is not None
                    and (step + 1) % cfg.checkpoint_every == 0):
                save_checkpoint(out_dir / f"step{step + 1:06d}.ckpt",
                                pipeline, optimizer, cfg, step + 1)
        if out_dir is not None:
            save_checkpoint(out_dir / "final.ckpt", pipeline, optimizer,
                            cfg, cfg.total_steps)
    finally:
        if log_fh is not None:
            log_fh.close()
    return pipeline


def build_ablation(base: PipelineConfig, name: str) -> PipelineConfig:
    if name not in ("full", "no_ca", "no_dca"):
        raise ValueError(f"unknown ablation {name!r}")
    d = base.to_dict()
    d["ablation"] = name
    return PipelineConfig.from_dict(d)
