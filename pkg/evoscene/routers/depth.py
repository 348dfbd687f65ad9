from typing import Union

from fastapi import APIRouter, Depends, HTTPException

from evoscene.errors import EvoSceneError, NoDataError
from evoscene.schemas import (
    ArrayPayload,
    CameraModel,
    DepthRequest,
    DepthResponse,
    ErrorResponse,
    SuccessResponse,
)
from evoscene.service import ServiceState, get_state

router = APIRouter(tags=["depth"])


@router.post("/depth", response_model=Union[SuccessResponse, ErrorResponse])
def estimate_depth(request: DepthRequest, state: ServiceState = Depends(get_state)):
    """
    Profundidad métrica y cámara de una vista.

    Body:
    - image: imagen RGB (H, W, 3)
    - view_id: id de la vista registrada en el oráculo
    - camera_hint: cámara explícita (tiene prioridad sobre view_id)

    Retorna:
    - depth: mapa (H, W) con NaN en píxeles inválidos
    - camera: intrínsecos y pose mundo→cámara
    """
    try:
        image = request.image.decode(state.session_dir)
        hint = request.camera_hint.to_camera() if request.camera_hint is not None else None
        estimate = state.backends.depth.estimate(image, view_id=request.view_id, camera_hint=hint)

        data = DepthResponse(
            depth=ArrayPayload.encode(estimate.depth.values, state.session_dir),
            camera=CameraModel.from_camera(estimate.intrinsics, estimate.pose),
        )
        return SuccessResponse(
            success=True,
            data=data.model_dump(mode="json"),
            message=f"Profundidad {estimate.depth.width}x{estimate.depth.height}",
        )

    except HTTPException:
        raise
    except NoDataError as e:
        raise HTTPException(status_code=404, detail=str(e))
    except (ValueError, EvoSceneError) as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        raise HTTPException(
            status_code=500,
            detail=f"Error al estimar la profundidad: {str(e)}"
        )
