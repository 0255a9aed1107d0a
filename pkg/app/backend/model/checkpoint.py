import logging
from pathlib import Path
from typing import Dict, Tuple, Union

from app.backend.config.config import MODALITY_ORDER, Modality, Variant
from app.backend.exceptions import FormatError, ShapeError
from app.backend.kernel.numkernel import Matrix
from app.backend.model.model import ModelParams
from app.backend.storage.binary import BinaryReader, BinaryWriter, read_bytes, write_atomic


logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"NWSM"
VARIANT_TAGS: Dict[Variant, int] = {"ours": 0, "cls_agno": 1, "narr_bas": 2, "ful": 3}
_TAG_VARIANTS = {tag: v for v, tag in VARIANT_TAGS.items()}


def _modality_mask(modalities: Tuple[Modality, ...]) -> int:
    return sum(1 << i for i, m in enumerate(MODALITY_ORDER) if m in modalities)


def encode_checkpoint(params: ModelParams) -> bytes:
    params.validate()
    writer = (BinaryWriter(CHECKPOINT_MAGIC)
              .u8(VARIANT_TAGS[params.variant])
              .u8(int(params.shared_trunk))
              .u8(_modality_mask(params.modalities))
              .u32(params.c_verb).u32(params.c_noun).u32(params.d).u32(params.din)
              .u32(len(params.blocks)))
    for name, value in params.blocks.items():
        writer.text(name).u32(value.shape[0]).u32(value.shape[1]).matrix(value)
    return writer.getvalue()


def save_checkpoint(path: Union[str, Path], params: ModelParams) -> Path:
    written = write_atomic(path, encode_checkpoint(params))
    logger.info(f"Checkpoint ({params.variant}, {len(params.blocks)} blocks) saved to {written}")
    return written


def load_checkpoint(path: Union[str, Path]) -> ModelParams:
    """
    Reads an NWSM checkpoint and checks every block against the shapes its
    header implies.
    """
    reader = BinaryReader(read_bytes(path), CHECKPOINT_MAGIC, path=str(path))
    tag_offset = reader.offset
    tag = reader.u8("variant tag")
    variant = _TAG_VARIANTS.get(tag)
    if variant is None:
        raise FormatError(f"unknown variant tag {tag}", offset=tag_offset, path=str(path))
    shared = bool(reader.u8("shared_trunk"))
    mask = reader.u8("modality mask")
    modalities = tuple(m for i, m in enumerate(MODALITY_ORDER) if mask & (1 << i))
    c_verb, c_noun, d, din = (reader.u32(what) for what in ("C_verb", "C_noun", "d", "Din"))
    count = reader.u32("block count")
    blocks: Dict[str, Matrix] = {}
    for _ in range(count):
        name = reader.text("block name")
        rows, cols = reader.u32("rows"), reader.u32("cols")
        blocks[name] = reader.matrix(rows, cols, name)
    reader.expect_end()

    params = ModelParams(variant=variant, c_verb=c_verb, c_noun=c_noun, d=d, din=din,
                         shared_trunk=shared, modalities=modalities, blocks=blocks)
    try:
        params.validate()
    except ShapeError as e:
        raise FormatError(f"checkpoint blocks do not match header: {e}", path=str(path)) from e
    logger.info(f"Loaded {variant} checkpoint from {path} (d={d}, Din={din})")
    return params
