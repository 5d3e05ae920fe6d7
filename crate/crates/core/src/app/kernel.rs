use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use hrt_device::{DeviceType, KernelFn, KernelInvocation, ThreadGeometry};

use crate::{CoreError, Result};

pub type CostFn = Arc<dyn Fn(&ThreadGeometry) -> f64 + Send + Sync>;

/// A named kernel with one body per device type it can run on.
#[derive(Clone)]
pub struct KernelDefinition {
    name: String,
    bodies: HashMap<DeviceType, KernelFn>,
    cost: Option<CostFn>,
}

impl fmt::Debug for KernelDefinition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelDefinition")
            .field("name", &self.name)
            .field("device_types", &self.bodies.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl KernelDefinition {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            bodies: HashMap::new(),
            cost: None,
        }
    }

    pub fn body<F>(mut self, ty: DeviceType, f: F) -> Self
    where
        F: Fn(&mut KernelInvocation<'_>) -> Result<(), String> + Send + Sync + 'static,
    {
        self.bodies.insert(ty, Arc::new(f));
        self
    }

    pub fn host<F>(self, f: F) -> Self
    where
        F: Fn(&mut KernelInvocation<'_>) -> Result<(), String> + Send + Sync + 'static,
    {
        self.body(DeviceType::Host, f)
    }

    pub fn gpu<F>(self, f: F) -> Self
    where
        F: Fn(&mut KernelInvocation<'_>) -> Result<(), String> + Send + Sync + 'static,
    {
        self.body(DeviceType::GpuSim, f)
    }

    /// Same body on every device type.
    pub fn everywhere<F>(mut self, f: F) -> Self
    where
        F: Fn(&mut KernelInvocation<'_>) -> Result<(), String> + Send + Sync + 'static,
    {
        let f: KernelFn = Arc::new(f);
        self.bodies.insert(DeviceType::Host, f.clone());
        self.bodies.insert(DeviceType::GpuSim, f);
        self
    }

    /// Modelled duration in seconds as a function of the launch geometry.
    /// Without one the body's measured wall time is charged.
    pub fn cost<F>(mut self, f: F) -> Self
    where
        F: Fn(&ThreadGeometry) -> f64 + Send + Sync + 'static,
    {
        self.cost = Some(Arc::new(f));
        self
    }

    pub fn fixed_cost(self, seconds: f64) -> Self {
        self.cost(move |_| seconds)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn supports(&self, ty: DeviceType) -> bool {
        self.bodies.contains_key(&ty)
    }

    pub(crate) fn body_for(&self, ty: DeviceType) -> Option<KernelFn> {
        self.bodies.get(&ty).cloned()
    }

    pub(crate) fn cost_for(&self, g: &ThreadGeometry) -> Option<f64> {
        self.cost.as_ref().map(|c| c(g))
    }
}

/// Cheap reference to a registered kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KernelRef(pub(crate) u32);

impl KernelRef {
    pub fn index(self) -> u32 {
        self.0
    }
}

#[derive(Debug, Default)]
pub struct KernelRegistry {
    kernels: Vec<Arc<KernelDefinition>>,
    by_name: HashMap<String, KernelRef>,
}

impl KernelRegistry {
    pub fn register(&mut self, def: KernelDefinition) -> Result<KernelRef> {
        if self.by_name.contains_key(def.name()) {
            return Err(CoreError::DuplicateKernel(def.name.clone()));
        }
        if def.bodies.is_empty() {
            return Err(CoreError::EmptyKernel(def.name.clone()));
        }
        let r = KernelRef(self.kernels.len() as u32);
        self.by_name.insert(def.name.clone(), r);
        self.kernels.push(Arc::new(def));
        Ok(r)
    }

    pub fn lookup(&self, name: &str) -> Option<KernelRef> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, r: KernelRef) -> Option<Arc<KernelDefinition>> {
        self.kernels.get(r.0 as usize).cloned()
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }
}
