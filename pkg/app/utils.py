"""
    Utilities for talking to judge and caption models.
    This file builds the chat model client for an endpoint and the
    multimodal message payload sent to it.
"""

import base64
import mimetypes
import os
from typing import List, Optional

from langchain_core.messages import HumanMessage
from langchain_core.rate_limiters import InMemoryRateLimiter
from langchain_openai import ChatOpenAI

from app.logger import logger
from app.schemas import EndpointConfig, ImageRef


# creating LLM Model Object
def get_llm_object(
            endpoint: EndpointConfig
        ) -> ChatOpenAI:
    """Function to create the chat model object for one endpoint

    Args:
        endpoint (EndpointConfig): base URL, model name, sampling and rate settings

    Returns:
        _type_: ChatOpenAI: LLM Model Object
    """
    try:
        logger.info(f"Creating LLM object with model: {endpoint.model_name} at {endpoint.base_url}")
        api_key = os.getenv(endpoint.api_key_env)
        if not api_key:
            logger.warning(f"Environment variable {endpoint.api_key_env} is not set")

        rate_limiter = InMemoryRateLimiter(
            requests_per_second=endpoint.requests_per_minute / 60,
            check_every_n_seconds=0.05,
            max_bucket_size=endpoint.max_parallel,
        )
        llm = ChatOpenAI(
                model=endpoint.model_name,
                api_key=api_key or "not-set",
                base_url=endpoint.base_url,
                temperature=endpoint.temperature,
                top_p=endpoint.top_p,
                timeout=endpoint.timeout,
                # retries happen in the collector
                max_retries=0,
                rate_limiter=rate_limiter,
            )

        return llm
    except Exception as e:
        logger.error(f"Error creating LLM object: {e}")
        raise e


def encode_image(path: str) -> str:
    """Read an image file into a base64 data URL

    Args:
        path (str): image file

    Returns:
        _type_: str: data URL
    """
    mime_type = mimetypes.guess_type(path)[0] or "image/jpeg"
    with open(path, "rb") as image_file:
        payload = base64.b64encode(image_file.read()).decode("ascii")
    return f"data:{mime_type};base64,{payload}"


def build_messages(
            prompt: str,
            image: Optional[ImageRef],
            transport: str = "base64"
        ) -> List[HumanMessage]:
    """Build the single user turn sent to a model.

    Args:
        prompt (str): rendered prompt text
        image (Optional[ImageRef]): image to attach
        transport (str, optional): "url", "base64" or "none". Defaults to "base64".

    Raises:
        ValueError: the image lacks the url or path the transport needs

    Returns:
        List[HumanMessage]: chat messages
    """
    if transport == "none" or image is None:
        return [HumanMessage(content=prompt)]

    if transport == "url":
        if not image.url:
            raise ValueError(f"image {image.image_id} has no url for url transport")
        image_url = image.url
    elif transport == "base64":
        if not image.path:
            raise ValueError(f"image {image.image_id} has no path for base64 transport")
        image_url = encode_image(image.path)
    else:
        raise ValueError(f"unknown image transport {transport!r}")

    return [HumanMessage(content=[
        {"type": "text", "text": prompt},
        {"type": "image_url", "image_url": {"url": image_url}},
    ])]
