from typing import Union

from fastapi import APIRouter, Depends, HTTPException

from evoscene.errors import EvoSceneError
from evoscene.schemas import (
    CompleteRequest,
    ErrorResponse,
    SuccessResponse,
    completion_from_wire,
    completion_response_to_wire,
)
from evoscene.service import ServiceState, get_state

router = APIRouter(tags=["complete"])


@router.post("/complete", response_model=Union[SuccessResponse, ErrorResponse])
def complete_patch(request: CompleteRequest, state: ServiceState = Depends(get_state)):
    """
    Completa la ocupación de un parche P³.

    Retorna:
    - occupancy: ocupación binaria P³ (los vóxeles observados salen ocupados)
    - colors: color RGB por vóxel
    """
    try:
        domain = completion_from_wire(request, state.session_dir)
        response = state.backends.completer.complete(domain)
        data = completion_response_to_wire(response, state.session_dir)
        return SuccessResponse(
            success=True,
            data=data.model_dump(mode="json"),
            message=f"Parche {request.patch_index}: {int(response.occupancy.sum())} vóxeles ocupados",
        )

    except HTTPException:
        raise
    except (ValueError, EvoSceneError) as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        raise HTTPException(
            status_code=500,
            detail=f"Error al completar el parche: {str(e)}"
        )
