use proptest::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use liots_core::model::wire::{NotifyAvailabilityRequest, NotifyContextRequest, UpdateContextRequest};
use liots_core::model::{
    aggregate_responses, filter_attributes, match_entity, match_registration, AggregateMode, Annotation, Attribute,
    AttributeValue, ContextElement, EntityRef, GeoPoint, GridCell, QueryRequest, QueryResponse, Registration, Scope,
    Subscription, SubscriptionKind,
};
use liots_core::registrar::PrivacyDirective;
use liots_core::security::{Action, Effect, Identity, IdentityKind, Policy};

fn round_trip<T: Serialize + DeserializeOwned + PartialEq + std::fmt::Debug>(value: &T) {
    let json = serde_json::to_string(value).unwrap();
    let back: T = serde_json::from_str(&json).unwrap();
    assert_eq!(&back, value, "{json}");
}

fn name() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,7}"
}

fn geo() -> impl Strategy<Value = GeoPoint> {
    (-90.0..=90.0f64, -180.0..=180.0f64).prop_map(|(lat, lon)| GeoPoint::new(lat, lon))
}

fn value() -> impl Strategy<Value = AttributeValue> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |v| v.is_finite()).prop_map(AttributeValue::Number),
        ".{0,12}".prop_map(AttributeValue::Text),
        geo().prop_map(AttributeValue::GeoPoint),
        (name(), -1e6..1e6f64).prop_map(|(k, v)| AttributeValue::Structured(serde_json::json!({ k: v, "n": [1, 2] }))),
    ]
}

fn entity() -> impl Strategy<Value = EntityRef> {
    (name(), prop_oneof![Just("Car"), Just("Room"), Just("Meter")]).prop_map(|(id, ty)| EntityRef::new(id, ty))
}

fn pattern() -> impl Strategy<Value = EntityRef> {
    prop_oneof![
        entity(),
        ("[a-z]{0,3}", prop_oneof![Just("Car"), Just("*")]).prop_map(|(p, ty)| EntityRef::pattern(format!("{p}*"), ty)),
    ]
}

fn element() -> impl Strategy<Value = ContextElement> {
    (
        entity(),
        prop::collection::btree_map(name(), (value(), 0..1_000_000i64), 0..6),
        prop::option::of("http://[a-z]{1,6}:[1-9][0-9]{1,3}"),
    )
        .prop_map(|(entity, attrs, hint)| {
            let mut e = ContextElement::new(
                entity,
                attrs
                    .into_iter()
                    .map(|(name, (value, timestamp))| Attribute { name, value, timestamp })
                    .collect(),
            );
            e.provider_hint = hint;
            e
        })
}

fn scope() -> impl Strategy<Value = Scope> {
    prop_oneof![
        Just(Scope::None),
        geo().prop_map(Scope::ExactPoint),
        (-900i64..900, -1800i64..1800, prop_oneof![Just(0.1), Just(0.5), Just(1.0)])
            .prop_map(|(lat_index, lon_index, cell_size)| Scope::GridCell(GridCell { lat_index, lon_index, cell_size })),
        name().prop_map(Scope::NamedRegion),
    ]
}

fn registration() -> impl Strategy<Value = Registration> {
    (
        name(),
        1..u64::MAX / 2,
        prop::collection::vec(pattern(), 1..4),
        prop::collection::vec(name(), 0..4),
        scope(),
        0..100_000u64,
    )
        .prop_map(|(id, version, entities, attribute_names, scope, ttl)| Registration {
            registration_id: id,
            version,
            providing_endpoint: "http://127.0.0.1:4000".into(),
            entities,
            attribute_names,
            scope,
            ttl,
        })
}

proptest! {
    #[test]
    fn wire_round_trips(
        el in element(),
        reg in registration(),
        entities in prop::collection::vec(pattern(), 0..4),
        attrs in prop::collection::vec(name(), 0..4),
        scope in prop::option::of(scope()),
        average in any::<bool>(),
        ttl in 0..10_000u64,
        availability in any::<bool>(),
    ) {
        round_trip(&el);
        round_trip(&reg);
        let q = QueryRequest {
            scope,
            aggregate: if average { AggregateMode::Average } else { AggregateMode::Set },
            ..QueryRequest::new(entities.clone(), attrs.clone())
        };
        round_trip(&q);
        round_trip(&QueryResponse {
            context_elements: vec![el.clone()],
            annotations: vec![Annotation { source: "http://x:1".into(), code: 504, reason: "timeout".into() }],
        });
        let mut sub = Subscription::context(entities, attrs, "http://cb:9", ttl);
        if availability {
            sub.kind = SubscriptionKind::Availability;
        }
        sub.subscription_id = "s-1".into();
        round_trip(&sub);
        round_trip(&UpdateContextRequest { context_elements: vec![el.clone()] });
        round_trip(&NotifyContextRequest { subscription_id: "s".into(), context_elements: vec![el] });
        round_trip(&NotifyAvailabilityRequest { subscription_id: "s".into(), registrations: vec![reg] });
    }

    #[test]
    fn security_types_round_trip(subject in name(), secret in ".{1,16}", deny in any::<bool>(), filter in prop::option::of(prop::collection::vec(name(), 0..3))) {
        round_trip(&Identity::new(subject.clone(), IdentityKind::User, secret));
        let mut p = if deny {
            Policy::deny("r", &subject, Action::Query, "Car/*")
        } else {
            Policy::permit("r", &subject, Action::Any, "*/speed")
        };
        if p.effect == Effect::Permit {
            p.filter = filter;
        }
        round_trip(&p);
    }

    #[test]
    fn directives_round_trip(ty in name(), cell in 0.01..5.0f64) {
        round_trip(&PrivacyDirective::by_type_and_grid(&ty, cell));
    }

    #[test]
    fn match_entity_is_reflexive(e in entity()) {
        prop_assert!(match_entity(&e, &e));
    }

    #[test]
    fn universal_pattern_matches_everything(e in entity()) {
        prop_assert!(match_entity(&EntityRef::pattern("*", "*"), &e));
    }

    #[test]
    fn filter_is_idempotent(e in element(), allowed in prop::collection::vec(name(), 0..4)) {
        let once = filter_attributes(&e, &allowed);
        prop_assert_eq!(filter_attributes(&once, &allowed), once.clone());
        if !allowed.is_empty() {
            prop_assert!(once.attributes.iter().all(|a| allowed.contains(&a.name)));
        }
    }

    #[test]
    fn set_aggregation_is_idempotent(parts in prop::collection::vec(prop::collection::vec(element(), 0..4), 1..4)) {
        let parts: Vec<QueryResponse> = parts.into_iter().map(QueryResponse::of).collect();
        let once = aggregate_responses(&parts, AggregateMode::Set).unwrap();
        let twice = aggregate_responses(&[once.clone(), once.clone()], AggregateMode::Set).unwrap();
        prop_assert_eq!(twice, once);
    }

    #[test]
    fn aggregation_ignores_part_order(
        parts in prop::collection::vec(prop::collection::vec(element(), 0..4), 1..5),
        numbers in prop::collection::vec(prop::collection::vec((0..3usize, 0..3usize, -1e3..1e3f64), 1..5), 1..5),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let parts: Vec<QueryResponse> = parts.into_iter().map(QueryResponse::of).collect();
        let mut shuffled = parts.clone();
        shuffled.shuffle(&mut rng);
        prop_assert_eq!(
            aggregate_responses(&parts, AggregateMode::Set).unwrap(),
            aggregate_responses(&shuffled, AggregateMode::Set).unwrap()
        );

        // averages: numeric attributes only, compared within rounding
        let numeric: Vec<QueryResponse> = numbers
            .into_iter()
            .map(|els| {
                QueryResponse::of(
                    els.into_iter()
                        .enumerate()
                        .map(|(i, (ty, attr, v))| {
                            ContextElement::new(
                                EntityRef::new(format!("e{i}"), ["Car", "Room", "Meter"][ty]),
                                vec![Attribute::number(["t", "h", "p"][attr], v, 1)],
                            )
                        })
                        .collect(),
                )
            })
            .collect();
        let mut numeric_shuffled = numeric.clone();
        numeric_shuffled.shuffle(&mut rng);
        let a = aggregate_responses(&numeric, AggregateMode::Average).unwrap();
        let b = aggregate_responses(&numeric_shuffled, AggregateMode::Average).unwrap();
        prop_assert_eq!(a.context_elements.len(), b.context_elements.len());
        for (x, y) in a.context_elements.iter().zip(&b.context_elements) {
            prop_assert_eq!(&x.entity, &y.entity);
            for (p, q) in x.attributes.iter().zip(&y.attributes) {
                prop_assert_eq!(&p.name, &q.name);
                let (p, q) = (p.value.as_number().unwrap(), q.value.as_number().unwrap());
                prop_assert!((p - q).abs() <= 1e-9 * (1.0 + p.abs()));
            }
        }
    }

    #[test]
    fn registration_match_agrees_with_its_definition(q_entities in prop::collection::vec(pattern(), 1..3), q_attrs in prop::collection::vec(name(), 0..3), reg in registration()) {
        let q = QueryRequest::new(q_entities.clone(), q_attrs.clone());
        // two prefix patterns overlap iff some concrete entity matches both;
        // candidate witnesses are the stripped ids and the concrete types
        let witnesses: Vec<EntityRef> = q_entities.iter().chain(&reg.entities)
            .flat_map(|a| q_entities.iter().chain(&reg.entities).map(move |b| (a, b)))
            .flat_map(|(a, b)| {
                let ty = [&a.entity_type, &b.entity_type].into_iter().find(|t| *t != "*").cloned().unwrap_or("Car".into());
                [EntityRef::new(a.id.replace('*', ""), ty.clone()), EntityRef::new(b.id.replace('*', ""), ty)]
            })
            .collect();
        let entity_hit = q_entities.iter().any(|a| reg.entities.iter().any(|b| {
            witnesses.iter().any(|w| match_entity(a, w) && match_entity(b, w))
        }));
        let attr_hit = q_attrs.is_empty() || reg.attribute_names.is_empty() || q_attrs.iter().any(|a| reg.attribute_names.contains(a));
        prop_assert_eq!(match_registration(&q, &reg), entity_hit && attr_hit);
    }
}

#[test]
fn spec_examples() {
    let car = |id: &str, ty: &str| EntityRef::new(id, ty);
    assert!(match_entity(&EntityRef::pattern("car-*", "Car"), &car("car-7", "Car")));
    assert!(!match_entity(&car("car-7", "Car"), &car("car-7", "Bike")));

    let reg = |ty: &str, attrs: &[&str], scope: Scope| Registration {
        registration_id: "r".into(),
        version: 1,
        providing_endpoint: "http://p:1".into(),
        entities: vec![EntityRef::pattern("*", ty)],
        attribute_names: attrs.iter().map(|s| s.to_string()).collect(),
        scope,
        ttl: 60,
    };
    let q = |ty: &str, attrs: &[&str]| {
        QueryRequest::new(vec![EntityRef::pattern("*", ty)], attrs.iter().map(|s| s.to_string()).collect())
    };
    assert!(match_registration(&q("Temperature", &["value"]), &reg("Temperature", &[], Scope::None)));
    assert!(!match_registration(&q("Temperature", &["humidity"]), &reg("Temperature", &["temp"], Scope::None)));
    let cell = |lat, lon| Scope::GridCell(GridCell { lat_index: lat, lon_index: lon, cell_size: 1.0 });
    let mut scoped = q("Temperature", &[]);
    scoped.scope = Some(cell(5, 3));
    assert!(!match_registration(&scoped, &reg("Temperature", &[], cell(5, 4))));
    assert!(match_registration(&scoped, &reg("Temperature", &[], cell(5, 3))));

    // 100 attributes, 20 allowed
    let wide = ContextElement::new(
        car("e", "Car"),
        (0..100).map(|i| Attribute::number(format!("a{i}"), i as f64, 1)).collect(),
    );
    let allowed: Vec<String> = (0..100).step_by(5).map(|i| format!("a{i}")).collect();
    let narrowed = filter_attributes(&wide, &allowed);
    assert_eq!(narrowed.attributes.len(), 20);
    assert!(filter_attributes(&wide, &["z".into()]).attributes.is_empty());

    let t = |id: &str, v: f64, ts: i64| {
        QueryResponse::of(vec![ContextElement::new(car(id, "Car"), vec![Attribute::number("t", v, ts)])])
    };
    let merged = aggregate_responses(&[t("e1", 10.0, 5), t("e1", 12.0, 9)], AggregateMode::Set).unwrap();
    assert_eq!(merged.context_elements[0].attributes[0].value, AttributeValue::Number(12.0));
    let avg = aggregate_responses(&[t("e1", 10.0, 1), t("e1", 30.0, 1)], AggregateMode::Average).unwrap();
    assert_eq!(avg.context_elements.len(), 1);
    assert_eq!(avg.context_elements[0].attributes[0].value, AttributeValue::Number(20.0));
}
