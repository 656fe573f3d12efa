from fastapi import FastAPI
from fastapi.responses import JSONResponse

from clockdistill.detector.routers import router as detector_router
from clockdistill.logging import configure_logging

# LOGGING
configure_logging()

app = FastAPI(title="clockdistill")
# include routers below
app.include_router(detector_router)


# global endpoints
@app.get(path="/test")
def test_connection() -> JSONResponse:
    return JSONResponse(
        content={
            "status": "You are now connected to the clockdistill API",
        },
        status_code=200,
    )
