"""Eager U-Net attention processor with optional key masking and recording."""

from __future__ import annotations

from collections import defaultdict

import torch


class AttentionRecorder:
    """Accumulates head-averaged cross-attention probabilities per layer.

    Maps are summed over sampling steps; masked-mass and row-sum checks are
    tracked on the fly so nothing per-step has to be kept.
    """

    def __init__(self, keep: torch.Tensor | None = None):
        self.keep = keep
        self.sums: dict[str, torch.Tensor] = {}
        self.counts: dict[str, int] = defaultdict(int)
        self.max_masked_prob = 0.0
        self.max_row_sum_error = 0.0

    def add(self, layer: str, probs: torch.Tensor, heads: int) -> None:
        # probs: (batch * heads, queries, keys)
        probs = probs.detach().float()
        row_err = (probs.sum(-1) - 1.0).abs().max().item()
        self.max_row_sum_error = max(self.max_row_sum_error, row_err)
        if self.keep is not None and not bool(self.keep.all()):
            masked = probs[..., ~self.keep.to(probs.device)]
            self.max_masked_prob = max(self.max_masked_prob, masked.abs().max().item())
        b = probs.shape[0] // heads
        mean = probs.reshape(b, heads, *probs.shape[1:]).mean(dim=(0, 1)).cpu()
        if layer in self.sums:
            self.sums[layer] += mean
        else:
            self.sums[layer] = mean.clone()
        self.counts[layer] += 1

    def layer_maps(self) -> dict[str, torch.Tensor]:
        """Per layer: ``(queries, keys)`` attention averaged over steps and heads."""
        return {k: v / self.counts[k] for k, v in self.sums.items()}


class ProbeAttnProcessor:
    """Numerically identical to diffusers' eager ``AttnProcessor`` unless asked.

    With ``token_keep`` given, cross-attention logits at dropped key slots are
    set to -inf before the softmax, so rows stay normalised and dropped slots
    get exactly zero weight. With ``recorder`` given, cross-attention
    probabilities are logged.
    """

    def __init__(self, name: str = ""):
        self.name = name

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None,
                 temb=None, token_keep=None, recorder=None):
        residual = hidden_states
        if attn.spatial_norm is not None:
            hidden_states = attn.spatial_norm(hidden_states, temb)

        input_ndim = hidden_states.ndim
        if input_ndim == 4:
            batch_size, channel, height, width = hidden_states.shape
            hidden_states = hidden_states.view(batch_size, channel, height * width).transpose(1, 2)

        is_cross = encoder_hidden_states is not None
        batch_size, sequence_length, _ = (
            hidden_states.shape if encoder_hidden_states is None else encoder_hidden_states.shape
        )
        attention_mask = attn.prepare_attention_mask(attention_mask, sequence_length, batch_size)

        if attn.group_norm is not None:
            hidden_states = attn.group_norm(hidden_states.transpose(1, 2)).transpose(1, 2)

        query = attn.to_q(hidden_states)
        if encoder_hidden_states is None:
            encoder_hidden_states = hidden_states
        elif attn.norm_cross:
            encoder_hidden_states = attn.norm_encoder_hidden_states(encoder_hidden_states)

        key = attn.head_to_batch_dim(attn.to_k(encoder_hidden_states))
        value = attn.head_to_batch_dim(attn.to_v(encoder_hidden_states))
        query = attn.head_to_batch_dim(query)

        if is_cross and token_keep is not None and not bool(token_keep.all()):
            bias = torch.zeros(key.shape[1], dtype=query.dtype, device=query.device)
            bias[~token_keep.to(query.device)] = float("-inf")
            bias = bias.expand(query.shape[0], 1, -1)
            attention_mask = bias if attention_mask is None else attention_mask + bias

        probs = attn.get_attention_scores(query, key, attention_mask)
        if is_cross and recorder is not None:
            recorder.add(self.name, probs, attn.heads)

        hidden_states = torch.bmm(probs, value)
        hidden_states = attn.batch_to_head_dim(hidden_states)
        hidden_states = attn.to_out[0](hidden_states)
        hidden_states = attn.to_out[1](hidden_states)

        if input_ndim == 4:
            hidden_states = hidden_states.transpose(-1, -2).reshape(batch_size, channel, height, width)
        if attn.residual_connection:
            hidden_states = hidden_states + residual
        return hidden_states / attn.rescale_output_factor


def install_probe_processors(unet) -> None:
    unet.set_attn_processor({name: ProbeAttnProcessor(name) for name in unet.attn_processors})
