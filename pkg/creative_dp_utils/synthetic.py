"""
Deterministic synthetic click logs for smoke runs and tests.

Each synthetic user prefers one product category; its history is mostly drawn
from that category. Ads come with selling points and a couple of search
queries, and each log row pairs a user with an ad of a random category.
"""

from typing import Dict, List

import numpy as np

from creative_dp_utils.datamodel import Ad, Item, RawLogRow

CATALOG: Dict[str, Dict[str, List[str]]] = {
    "outdoor": {
        "products": ["hiking boots", "camping tent", "trail backpack", "rain jacket", "sleeping bag"],
        "adjectives": ["waterproof", "lightweight", "durable", "breathable"],
        "queries": ["hiking gear", "camping equipment"],
    },
    "kitchen": {
        "products": ["coffee grinder", "cast iron pan", "chef knife", "rice cooker", "tea kettle"],
        "adjectives": ["stainless", "compact", "nonstick", "quiet"],
        "queries": ["kitchen tools", "cookware sale"],
    },
    "beauty": {
        "products": ["face serum", "lip balm", "hand cream", "sunscreen lotion", "hair mask"],
        "adjectives": ["gentle", "hydrating", "fragrance free", "organic"],
        "queries": ["skin care", "moisturizer for dry skin"],
    },
    "fitness": {
        "products": ["yoga mat", "resistance bands", "running shoes", "water bottle", "jump rope"],
        "adjectives": ["non slip", "portable", "cushioned", "adjustable"],
        "queries": ["home workout", "running gear"],
    },
}
SELLING_POINTS = ["free shipping", "two year warranty", "easy returns", "gift wrapping", "bundle discount"]


def make_catalog_items() -> Dict[str, List[Item]]:
    """Every (adjective, product) pair per category as an item with a category attribute."""
    items: Dict[str, List[Item]] = {}
    for category, pools in CATALOG.items():
        items[category] = [
            Item(item_id=f"{category}-{p}-{a}", title=f"{adjective} {product}",
                 attributes=[("category", category)])
            for p, product in enumerate(pools["products"])
            for a, adjective in enumerate(pools["adjectives"])
        ]
    return items


def make_ads(n_ads: int, seed: int = 0) -> List[Ad]:
    rng = np.random.default_rng([seed, 1])
    categories = list(CATALOG)
    ads = []
    for i in range(n_ads):
        category = categories[i % len(categories)]
        pools = CATALOG[category]
        product = pools["products"][int(rng.integers(len(pools["products"])))]
        adjective = pools["adjectives"][int(rng.integers(len(pools["adjectives"])))]
        points = [str(p) for p in rng.choice(SELLING_POINTS, size=2, replace=False)]
        ads.append(Ad(
            ad_id=f"ad-{i:03d}", original_title=f"{adjective} {product} on sale",
            selling_points=[f"{adjective} design", *points], potential_queries=list(pools["queries"]),
        ))
    return ads


def make_synthetic_logs(n_rows: int, n_users: int = 50, n_ads: int = 12, history_length: int = 8,
                        seed: int = 0) -> List[RawLogRow]:
    """
    ``n_rows`` log rows over ``n_users`` users and ``n_ads`` ads.

    Users are reused round-robin with a fixed history; half of the rows carry
    the ad's first query. Output depends only on the arguments.
    """
    if min(n_rows, n_users, n_ads, history_length) < 1:
        raise ValueError("n_rows, n_users, n_ads and history_length must be >= 1")
    rng = np.random.default_rng([seed, 0])
    items = make_catalog_items()
    categories = list(CATALOG)
    ads = make_ads(n_ads, seed)

    histories = {}
    for u in range(n_users):
        favourite = categories[u % len(categories)]
        history = []
        for _ in range(history_length):
            category = favourite if rng.random() < 0.75 else categories[int(rng.integers(len(categories)))]
            pool = items[category]
            history.append(pool[int(rng.integers(len(pool)))])
        histories[f"user-{u:03d}"] = history

    rows = []
    user_ids = list(histories)
    for r in range(n_rows):
        user_id = user_ids[r % n_users]
        ad = ads[int(rng.integers(n_ads))]
        if r % 2 == 0:
            ad = ad.model_copy(update={"query": ad.potential_queries[0]})
        history = histories[user_id]
        labels = [(history[-1].item_id, 1)]
        rows.append(RawLogRow(user_id=user_id, history=history, ad=ad, click_labels=labels))
    return rows
