from typing import Union

from fastapi import APIRouter, Depends, HTTPException

from evoscene.errors import EvoSceneError
from evoscene.schemas import (
    ErrorResponse,
    SuccessResponse,
    SynthesizeRequest,
    synthesis_from_wire,
    synthesis_response_to_wire,
)
from evoscene.service import ServiceState, get_state

router = APIRouter(tags=["synthesize"])


@router.post("/synthesize", response_model=Union[SuccessResponse, ErrorResponse])
def synthesize_views(request: SynthesizeRequest, state: ServiceState = Depends(get_state)):
    """
    Genera un frame por pose de la trayectoria.

    Validaciones:
    - view_ids y trajectory tienen la misma longitud

    Retorna:
    - frames: exactamente N imágenes (H, W, 3)
    - poses: pose mundo→cámara de cada frame
    """
    try:
        domain = synthesis_from_wire(request, state.session_dir)
        response = state.backends.synthesizer.synthesize(domain)
        data = synthesis_response_to_wire(response, state.session_dir)
        return SuccessResponse(
            success=True,
            data=data.model_dump(mode="json"),
            message=f"Se generaron {len(response.frames)} frames",
        )

    except HTTPException:
        raise
    except (ValueError, EvoSceneError) as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        raise HTTPException(
            status_code=500,
            detail=f"Error al sintetizar vistas: {str(e)}"
        )
