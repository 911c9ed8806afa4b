"""
ShopSim: a synthetic shopping website with dense outcome rewards.

The agent searches the catalog, opens a product, selects options and buys. The
purchase is scored by how well the product and the selected options match the goal.
"""
import enum
import itertools
import logging
from collections import abc
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

from marshmallow import ValidationError, fields, post_load, validate, validates_schema

from steprefine.core import BaseEnvironment, Instruction, Observation, Trajectory
from steprefine.exceptions import ConfigurationError, ContractViolation, DataCorruptionError, DatasetGenerationError
from steprefine.fields import TokenSet
from steprefine.schema import StrictSchema
from steprefine.utils import derive_rng

logger = logging.getLogger(__name__)

TYPE_VOCAB = (
    'shirt', 'dress', 'shoes', 'jacket', 'hat', 'bag', 'lamp', 'mug', 'scarf', 'watch', 'belt', 'sofa',
)
ATTRIBUTE_VOCAB = (
    'cotton', 'leather', 'waterproof', 'organic', 'wireless', 'slim', 'vintage', 'lightweight',
    'wool', 'silk', 'recycled', 'handmade', 'compact', 'ergonomic', 'foldable', 'durable',
    'breathable', 'insulated', 'stretch', 'matte',
)
OPTION_VOCAB = (
    'small', 'medium', 'large', 'red', 'blue', 'black', 'white', 'green', 'grey', 'pink', 'xl', 'xs',
)

DISTRACTOR_KINDS = ('over_budget', 'missing_attribute', 'wrong_type', 'missing_option', 'random')


class ShopConfig(NamedTuple):
    train_size: int = 300
    test_size: int = 100
    n_types: int = 8
    n_attributes: int = 16
    n_options: int = 8
    distractors_per_task: int = 5
    top_k: int = 5


class Product(NamedTuple):
    product_id: str
    ptype: str
    attributes: FrozenSet[str]
    options: FrozenSet[str]
    price: float

    @property
    def tokens(self) -> FrozenSet[str]:
        """ What a search query is matched against. """
        return self.attributes | {self.ptype}

    def to_record(self) -> dict:
        return ProductSchema().dump(self)


class ShopGoal(NamedTuple):
    target_type: str
    required_attributes: FrozenSet[str]
    required_options: FrozenSet[str]
    budget: float

    @property
    def full_query(self) -> FrozenSet[str]:
        return self.required_attributes | {self.target_type}

    @property
    def type_query(self) -> FrozenSet[str]:
        return frozenset({self.target_type})


@dataclass(frozen=True)
class Search:
    query: FrozenSet[str]

    @property
    def text(self) -> str:
        return f'search[{" ".join(sorted(self.query))}]'


@dataclass(frozen=True)
class ClickProduct:
    product_id: str

    @property
    def text(self) -> str:
        return f'click[{self.product_id}]'


@dataclass(frozen=True)
class ClickOption:
    option: str

    @property
    def text(self) -> str:
        return f'click[{self.option}]'


@dataclass(frozen=True)
class Back:
    @property
    def text(self) -> str:
        return 'click[back]'


@dataclass(frozen=True)
class Buy:
    @property
    def text(self) -> str:
        return 'click[buy now]'


class PageKind(str, enum.Enum):
    HOME = 'home'
    RESULTS = 'results'
    PRODUCT = 'product'
    PURCHASED = 'purchased'


class ShopState(NamedTuple):
    task_id: str
    page: PageKind = PageKind.HOME
    #: Ranked product ids of the last search.
    results: Tuple[str, ...] = ()
    product_id: Optional[str] = None
    selected: FrozenSet[str] = frozenset()
    #: Product pages opened so far, in order.
    visited: Tuple[str, ...] = ()
    step_counter: int = 0
    done: bool = False
    completed: bool = False


class ProductSchema(StrictSchema):
    class Meta:
        versioned = True

    product_id = fields.Str(required=True)
    ptype = fields.Str(required=True)
    attributes = TokenSet(required=True)
    options = TokenSet(required=True)
    price = fields.Float(required=True, validate=validate.Range(min=0.0, min_inclusive=False))

    @post_load
    def make_product(self, data, **kwargs):
        return Product(**data)


class ShopGoalSchema(StrictSchema):
    target_type = fields.Str(required=True)
    required_attributes = TokenSet(required=True)
    required_options = TokenSet(required=True)
    budget = fields.Float(required=True, validate=validate.Range(min=0.0, min_inclusive=False))

    @validates_schema
    def validate_requirements(self, data, **kwargs):
        if not data.get('required_attributes') and not data.get('required_options'):
            raise ValidationError('A goal needs at least one required attribute or option.')

    @post_load
    def make_goal(self, data, **kwargs):
        return ShopGoal(**data)


def score_purchase(goal: ShopGoal, product: Product, selected_options: Iterable[str]) -> float:
    """
    Score of buying ``product`` with ``selected_options``: the fraction of matched
    attributes, options and budget, or ``0`` when the product type is wrong.
    """
    if product.ptype != goal.target_type:
        return 0.0
    matched = (
        len(goal.required_attributes & product.attributes)
        + len(goal.required_options & frozenset(selected_options))
        + (1 if product.price <= goal.budget else 0)
    )
    return matched / (len(goal.required_attributes) + len(goal.required_options) + 1)


def best_option_score(goal: ShopGoal, product: Product) -> float:
    """ Max purchase score of ``product`` over every subset of its options. """
    options = sorted(product.options)
    subsets = itertools.chain.from_iterable(itertools.combinations(options, size) for size in range(len(options) + 1))
    return max(score_purchase(goal, product, subset) for subset in subsets)


def heuristic_page_score(goal: ShopGoal, page: ShopState, catalog: Mapping[str, Product]) -> float:
    """
    Ground-truth value of a page: ``0`` at home, the best product on a results page,
    the best option assignment on a product page, and the purchase score once bought.
    """
    if page.page == PageKind.HOME:
        return 0.0
    if page.page == PageKind.RESULTS:
        return max((best_option_score(goal, catalog[product_id]) for product_id in page.results), default=0.0)
    product = catalog[page.product_id]
    if page.page == PageKind.PRODUCT:
        return best_option_score(goal, product)
    return score_purchase(goal, product, page.selected)


class Catalog(abc.Mapping):
    """ Immutable product collection with deterministic token-overlap search. """

    def __init__(self, products: Iterable[Product], top_k: int = 5) -> None:
        self.top_k = top_k
        self._products = {}  # type: Dict[str, Product]
        for product in products:
            if product.product_id in self._products:
                raise ConfigurationError(f'Duplicate product id `{product.product_id}`.')
            self._products[product.product_id] = product
        self._searches = {}  # type: Dict[FrozenSet[str], Tuple[str, ...]]

    def __getitem__(self, product_id: str) -> Product:
        return self._products[product_id]

    def __iter__(self):
        return iter(sorted(self._products))

    def __len__(self) -> int:
        return len(self._products)

    def search(self, query: FrozenSet[str]) -> Tuple[str, ...]:
        """
        Product ids ranked by overlap between ``query`` and type plus attributes,
        ties broken by product id. Products without overlap are not listed.
        """
        results = self._searches.get(query)
        if results is None:
            ranked = sorted(
                (-len(query & product.tokens), product.product_id)
                for product in self._products.values()
                if query & product.tokens
            )
            results = tuple(product_id for _, product_id in ranked[:self.top_k])
            self._searches[query] = results
        return results


class ShopSimEnvironment(BaseEnvironment):
    """
    Action slots, in order: the full search and the type-only search of the goal,
    one click per result rank, one click per option, back, buy now.
    """
    env_id = 'shopsim'
    max_turns = 10
    default_tau = 0.01
    goal_schema = ShopGoalSchema
    config_class = ShopConfig
    split_names = ('train', 'test')

    def __init__(
        self,
        catalog: Iterable[Product],
        instructions: Sequence[Instruction],
        top_k: int = 5,
        options: Sequence[str] = OPTION_VOCAB[:8],
    ) -> None:
        super().__init__(instructions)
        self.catalog = Catalog(catalog, top_k)
        self.top_k = top_k
        self.options = tuple(options)
        self._option_slots = {option: index for index, option in enumerate(self.options)}

    @property
    def n_actions(self) -> int:
        return 2 + self.top_k + len(self.options) + 2

    @classmethod
    def generate(cls, config: ShopConfig, seed: int) -> Tuple['ShopSimEnvironment', Dict[str, List[Instruction]]]:
        catalog, splits = generate_shop_dataset(config, seed)
        instructions = [instruction for split in splits.values() for instruction in split]
        return cls(catalog, instructions, config.top_k, OPTION_VOCAB[:config.n_options]), splits

    def assets(self) -> Dict[str, List[dict]]:
        return {'catalog': [self.catalog[product_id].to_record() for product_id in self.catalog]}

    @classmethod
    def from_assets(
        cls, assets: Dict[str, List[dict]], instructions: Sequence[Instruction], config: ShopConfig,
    ) -> 'ShopSimEnvironment':
        schema = ProductSchema()
        catalog = [schema.load_record(record) for record in assets['catalog']]
        return cls(catalog, instructions, config.top_k, OPTION_VOCAB[:config.n_options])

    def goal_of(self, state: ShopState) -> ShopGoal:
        return self.get_instruction(state.task_id).goal

    def initial_state(self, instruction: Instruction) -> ShopState:
        return ShopState(task_id=instruction.task_id)

    def observe_initial(self, state: ShopState) -> Observation:
        return self._observe(state)

    def transition(self, state: ShopState, action):
        page = state.page
        if isinstance(action, Search) and page == PageKind.HOME:
            next_state = state._replace(page=PageKind.RESULTS, results=self.catalog.search(action.query))
        elif isinstance(action, ClickProduct) and page == PageKind.RESULTS and action.product_id in state.results:
            next_state = state._replace(
                page=PageKind.PRODUCT, product_id=action.product_id, selected=frozenset(),
                visited=state.visited + (action.product_id,),
            )
        elif isinstance(action, ClickOption) and page == PageKind.PRODUCT and self._selectable(state, action.option):
            next_state = state._replace(selected=state.selected | {action.option})
        elif isinstance(action, Back) and page == PageKind.RESULTS:
            next_state = state._replace(page=PageKind.HOME, results=())
        elif isinstance(action, Back) and page == PageKind.PRODUCT:
            next_state = state._replace(page=PageKind.RESULTS, product_id=None, selected=frozenset())
        elif isinstance(action, Buy) and page == PageKind.PRODUCT:
            next_state = state._replace(page=PageKind.PURCHASED)
        else:
            return None
        return next_state, self._observe(next_state), next_state.page == PageKind.PURCHASED

    def _selectable(self, state: ShopState, option: str) -> bool:
        return option in self.catalog[state.product_id].options and option not in state.selected

    def outcome(self, state: ShopState) -> float:
        if state.page != PageKind.PURCHASED:
            return 0.0
        return score_purchase(self.goal_of(state), self.catalog[state.product_id], state.selected)

    def ground_truth_score(self, instruction: Instruction, state: ShopState) -> float:
        return heuristic_page_score(instruction.goal, state, self.catalog)

    def legal_actions(self, state: ShopState) -> list:
        if state.done:
            return []
        if state.page == PageKind.HOME:
            goal = self.goal_of(state)
            searches = [Search(goal.full_query)]
            if goal.type_query != goal.full_query:
                searches.append(Search(goal.type_query))
            return searches
        if state.page == PageKind.RESULTS:
            return [ClickProduct(product_id) for product_id in state.results] + [Back()]
        options = [ClickOption(option) for option in self.options if self._selectable(state, option)]
        return options + [Back(), Buy()]

    def action_slot(self, state: ShopState, action) -> int:
        if isinstance(action, Search):
            goal = self.goal_of(state)
            if action.query == goal.full_query:
                return 0
            if action.query == goal.type_query:
                return 1
        elif isinstance(action, ClickProduct) and action.product_id in state.results:
            return 2 + state.results.index(action.product_id)
        elif isinstance(action, ClickOption) and action.option in self._option_slots:
            return 2 + self.top_k + self._option_slots[action.option]
        elif isinstance(action, Back):
            return 2 + self.top_k + len(self.options)
        elif isinstance(action, Buy):
            return 3 + self.top_k + len(self.options)
        raise ContractViolation(f'Action `{action.text}` has no slot in this state.')

    def parse_action(self, text: str):
        if text.startswith('search[') and text.endswith(']'):
            return Search(frozenset(text[len('search['):-1].split()))
        if not (text.startswith('click[') and text.endswith(']')):
            raise DataCorruptionError(f'Unknown action `{text}`.')
        element = text[len('click['):-1]
        if element == 'back':
            return Back()
        if element == 'buy now':
            return Buy()
        if element in self.catalog:
            return ClickProduct(element)
        if element in self._option_slots:
            return ClickOption(element)
        raise DataCorruptionError(f'Unknown action `{text}`.')

    def render_instruction(self, instruction: Instruction) -> str:
        goal = instruction.goal
        text = f'i need a {" ".join(sorted(goal.required_attributes))} {goal.target_type}'.replace('  ', ' ')
        if goal.required_options:
            text += f' in {", ".join(sorted(goal.required_options))}'
        return f'{text}, and price lower than {goal.budget:.2f} dollars'

    def instruction_tokens(self, instruction: Instruction) -> List[str]:
        goal = instruction.goal
        tokens = [f'goal_type:{goal.target_type}']
        tokens.extend(f'goal_att:{attribute}' for attribute in sorted(goal.required_attributes))
        tokens.extend(f'goal_opt:{option}' for option in sorted(goal.required_options))
        tokens.append(f'n_att:{len(goal.required_attributes)}')
        tokens.append(f'n_opt:{len(goal.required_options)}')
        return tokens

    def observation_tokens(self, instruction: Instruction, observation: Observation) -> List[str]:
        record = observation.record
        if 'page' not in record:
            return ['invalid']
        goal = instruction.goal
        tokens = [f'page:{record["page"]}']
        if record['page'] == PageKind.RESULTS:
            tokens.append(f'n_results:{len(record["products"])}')
            for rank, product in enumerate(record['products'], start=1):
                tokens.extend(f'r{rank}:{token}' for token in _match_tokens(goal, product))
        elif record['page'] == PageKind.PRODUCT:
            product = record['product']
            tokens.extend(f'prod:{token}' for token in _match_tokens(goal, product))
            selected = set(record['selected'])
            pending = False
            for option in sorted(goal.required_options):
                if option in selected:
                    tokens.append(f'has:{option}')
                elif option in product['options']:
                    tokens.append(f'need:{option}')
                    pending = True
                else:
                    tokens.append(f'lack:{option}')
            tokens.append('opts_pending' if pending else 'opts_done')
        return tokens

    def expert(self, instruction: Instruction) -> Trajectory:
        goal = instruction.goal
        results = self.catalog.search(goal.full_query)
        best = next(
            (product_id for product_id in results if best_option_score(goal, self.catalog[product_id]) == 1.0), None,
        )
        if best is None:
            raise DatasetGenerationError(f'No perfect product is listed for task `{instruction.task_id}`.')
        actions = [Search(goal.full_query), ClickProduct(best)]
        actions.extend(ClickOption(option) for option in self.options if option in goal.required_options)
        actions.append(Buy())
        return self.play(instruction, actions)

    def _observe(self, state: ShopState) -> Observation:
        if state.page == PageKind.HOME:
            instruction = self.render_instruction(self.get_instruction(state.task_id))
            return Observation(
                f'WebShop [SEP] Instruction: [SEP] {instruction} [SEP] Search',
                {'page': PageKind.HOME.value, 'instruction': instruction},
            )
        if state.page == PageKind.RESULTS:
            products = [self.catalog[product_id] for product_id in state.results]
            parts = ['[SEP] Back to Search', f'Page 1 (Total results: {len(products)})']
            for product in products:
                parts.extend([product.product_id, _describe(product), f'${product.price:.2f}'])
            return Observation(
                ' [SEP] '.join(parts),
                {'page': PageKind.RESULTS.value, 'products': [_product_record(product) for product in products]},
            )
        product = self.catalog[state.product_id]
        selected = sorted(state.selected)
        if state.page == PageKind.PRODUCT:
            text = (
                f'[SEP] Back to Search [SEP] < Prev [SEP] options: {", ".join(sorted(product.options))} '
                f'[SEP] selected: {", ".join(selected) or "none"} [SEP] {_describe(product)} '
                f'[SEP] Price: ${product.price:.2f} [SEP] Buy Now'
            )
            return Observation(
                text, {'page': PageKind.PRODUCT.value, 'product': _product_record(product), 'selected': selected},
            )
        reward = self.outcome(state)
        return Observation(
            f'Thank you for shopping with us! [SEP] Your score (min 0.0, max 1.0) [SEP] {reward:.4f}',
            {'page': PageKind.PURCHASED.value, 'product_id': product.product_id, 'selected': selected,
             'reward': reward},
        )


def _describe(product: Product) -> str:
    return ' '.join(sorted(product.attributes) + [product.ptype])


def _product_record(product: Product) -> dict:
    return {
        'product_id': product.product_id,
        'ptype': product.ptype,
        'attributes': sorted(product.attributes),
        'options': sorted(product.options),
        'price': product.price,
    }


def _match_tokens(goal: ShopGoal, product: dict) -> List[str]:
    """ How a listed product relates to the goal, the context a click decision needs. """
    attribute_hits = len(goal.required_attributes.intersection(product['attributes']))
    option_hits = len(goal.required_options.intersection(product['options']))
    return [
        'type_ok' if product['ptype'] == goal.target_type else 'type_no',
        f'att_{attribute_hits}of{len(goal.required_attributes)}',
        'price_ok' if product['price'] <= goal.budget else 'price_high',
        f'opt_{option_hits}of{len(goal.required_options)}',
    ]


def generate_shop_dataset(config: ShopConfig, seed: int) -> Tuple[List[Product], Dict[str, List[Instruction]]]:
    """
    Generates a catalog plus train and test tasks, deterministically under ``seed``.

    Each task contributes one product scoring ``1.0`` and a set of near misses.
    Product ids are assigned after shuffling the whole catalog, and only tasks whose
    full search lists a perfect product are kept.
    """
    if config.train_size <= 0 or config.test_size <= 0:
        raise ConfigurationError('Dataset sizes must be positive.', key_path='data')
    if config.n_types > len(TYPE_VOCAB) or config.n_attributes > len(ATTRIBUTE_VOCAB) \
            or config.n_options > len(OPTION_VOCAB):
        raise ConfigurationError('Vocabulary sizes exceed the available vocabularies.', key_path='data')
    if config.n_types < 2 or config.n_attributes < 4 or config.n_options < 3:
        raise ConfigurationError('Vocabularies are too small to draw distractors from.', key_path='data')

    rng = derive_rng(seed, 'shopsim')
    vocab = _Vocab(TYPE_VOCAB[:config.n_types], ATTRIBUTE_VOCAB[:config.n_attributes], OPTION_VOCAB[:config.n_options])
    n_tasks = config.train_size + config.test_size
    n_drafts = n_tasks + n_tasks // 4 + 10

    drafts = []
    products = []
    for _ in range(n_drafts):
        goal = _draw_goal(rng, vocab)
        perfect = _perfect_product(rng, goal, vocab)
        drafts.append(goal)
        products.append(perfect)
        for index in range(config.distractors_per_task):
            kind = DISTRACTOR_KINDS[index % len(DISTRACTOR_KINDS)]
            products.append(_distractor(rng, goal, perfect, kind, vocab))

    width = max(4, len(str(len(products))))
    order = rng.permutation(len(products))
    ids = {int(position): f'p{rank + 1:0{width}d}' for rank, position in enumerate(order)}
    products = [product._replace(product_id=ids[position]) for position, product in enumerate(products)]
    catalog = Catalog(products, config.top_k)

    kept = []
    for goal in drafts:
        results = catalog.search(goal.full_query)
        if any(best_option_score(goal, catalog[product_id]) == 1.0 for product_id in results):
            kept.append(goal)
        if len(kept) == n_tasks:
            break
    if len(kept) < n_tasks:
        raise DatasetGenerationError(f'Only {len(kept)} of {n_tasks} shopping tasks are solvable, try another seed.')
    logger.debug('Kept %s shopping tasks out of %s drafts.', n_tasks, n_drafts)

    width = max(4, len(str(n_tasks)))
    instructions = [
        Instruction(ShopSimEnvironment.env_id, f'shop-{index + 1:0{width}d}', goal) for index, goal in enumerate(kept)
    ]
    splits = {'train': instructions[:config.train_size], 'test': instructions[config.train_size:]}
    return [catalog[product_id] for product_id in catalog], splits


class _Vocab(NamedTuple):
    types: Sequence[str]
    attributes: Sequence[str]
    options: Sequence[str]


def _pick(rng, vocab: Sequence[str], size: int, exclude: Iterable[str] = ()) -> List[str]:
    pool = [token for token in vocab if token not in set(exclude)]
    indices = rng.choice(len(pool), size=min(size, len(pool)), replace=False)
    return sorted(pool[int(index)] for index in indices)


def _draw_goal(rng, vocab: _Vocab) -> ShopGoal:
    return ShopGoal(
        target_type=_pick(rng, vocab.types, 1)[0],
        required_attributes=frozenset(_pick(rng, vocab.attributes, int(rng.integers(1, 3)))),
        required_options=frozenset(_pick(rng, vocab.options, int(rng.integers(0, 3)))),
        budget=float(rng.integers(20, 101)),
    )


def _perfect_product(rng, goal: ShopGoal, vocab: _Vocab) -> Product:
    extra_attributes = _pick(rng, vocab.attributes, int(rng.integers(0, 2)), exclude=goal.required_attributes)
    extra_options = _pick(rng, vocab.options, int(rng.integers(1, 3)), exclude=goal.required_options)
    return Product(
        product_id='',
        ptype=goal.target_type,
        attributes=goal.required_attributes | frozenset(extra_attributes),
        options=goal.required_options | frozenset(extra_options),
        price=round(goal.budget * float(rng.uniform(0.3, 0.95)), 2),
    )


def _distractor(rng, goal: ShopGoal, perfect: Product, kind: str, vocab: _Vocab) -> Product:
    if kind == 'missing_option' and not goal.required_options:
        kind = 'over_budget'
    if kind == 'over_budget':
        return perfect._replace(price=round(goal.budget * float(rng.uniform(1.1, 1.8)), 2))
    if kind == 'missing_attribute':
        dropped = _pick(rng, sorted(goal.required_attributes), 1)[0]
        replacement = _pick(rng, vocab.attributes, 1, exclude=perfect.attributes)
        return perfect._replace(attributes=(perfect.attributes - {dropped}) | frozenset(replacement))
    if kind == 'wrong_type':
        return perfect._replace(ptype=_pick(rng, vocab.types, 1, exclude=[goal.target_type])[0])
    if kind == 'missing_option':
        dropped = _pick(rng, sorted(goal.required_options), 1)[0]
        options = perfect.options - {dropped}
        if not options:
            options = frozenset(_pick(rng, vocab.options, 1, exclude=goal.required_options))
        return perfect._replace(options=options)
    return Product(
        product_id='',
        ptype=_pick(rng, vocab.types, 1)[0],
        attributes=frozenset(_pick(rng, vocab.attributes, int(rng.integers(1, 4)))),
        options=frozenset(_pick(rng, vocab.options, int(rng.integers(1, 4)))),
        price=round(float(rng.uniform(5.0, 150.0)), 2),
    )
