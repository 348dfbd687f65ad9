from typing import Union

from fastapi import APIRouter, Depends, HTTPException

from evoscene.rendering import l1_gradient, loss_l1
from evoscene.schemas import ArrayPayload, ErrorResponse, LossRequest, LossResponse, SuccessResponse
from evoscene.service import ServiceState, get_state

router = APIRouter(tags=["loss"])


@router.post("/loss", response_model=Union[SuccessResponse, ErrorResponse])
def perceptual_loss(request: LossRequest, state: ServiceState = Depends(get_state)):
    """
    Pérdida perceptual de un frame contra su objetivo.
    El mock responde con L1 y su gradiente; un servicio real usa una red perceptual.
    """
    try:
        frame = request.frame.decode(state.session_dir)
        target = request.target.decode(state.session_dir)
        if frame.shape != target.shape:
            raise HTTPException(status_code=400, detail=f"formas distintas: {frame.shape} vs {target.shape}")

        data = LossResponse(
            loss=float(loss_l1(frame, target)),
            gradient=ArrayPayload.encode(l1_gradient(frame, target), state.session_dir),
        )
        return SuccessResponse(success=True, data=data.model_dump(mode="json"))

    except HTTPException:
        raise
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        raise HTTPException(
            status_code=500,
            detail=f"Error al evaluar la pérdida: {str(e)}"
        )
